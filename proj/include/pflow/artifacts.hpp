#pragma once

// Content hashing and crash-safe file output shared by every artifact writer.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <string_view>

namespace pflow {

class Fnv1a {
 public:
  void update_bytes(const void* data, std::size_t size);
  void update_string(std::string_view text) { update_bytes(text.data(), text.size()); }
  // Hashes the compact dump; nlohmann objects are key-sorted, so equal
  // documents hash equally.
  void update_json(const nlohmann::json& value) { update_string(value.dump()); }
  template <typename T>
  void update_value(const T& value) {
    update_bytes(&value, sizeof(T));
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(const nlohmann::json& value);

// Writes to a sibling temporary file and renames it over `path` only after
// the writer returns successfully, so a failed run never leaves a truncated
// artifact in place of a completed one.
void write_atomically(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer);
void write_text_atomically(const std::filesystem::path& path, std::string_view text);

std::string read_text(const std::filesystem::path& path);

}  // namespace pflow
