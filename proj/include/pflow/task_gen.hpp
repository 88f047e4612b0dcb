#pragma once

// Synthetic multi-step arithmetic word problems with worked rationales.
//
//   <bos> Q: Tom has 5 , gets 3 , loses 2 . how many ? A:
//   5 + 3 = 8 ; 8 - 2 = 6 ; #### 6 <eos>
//
// Numbers are spelled digit by digit. The question ends at "A:"; everything
// after it (including <eos>) is the rationale.

#include "pflow/tiny_lm.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pflow::tasks {

using lm::TokenId;

class Vocabulary {
 public:
  static const Vocabulary& standard();

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;
  std::string_view text(TokenId id) const;

  TokenId bos() const { return id("<bos>"); }
  TokenId eos() const { return id("<eos>"); }
  TokenId answer_delimiter() const { return id("####"); }

  // Whitespace-separated words; runs of digits become one token per digit.
  std::vector<TokenId> tokenize(std::string_view text) const;
  // Inverse of tokenize: digits are glued, everything else space-separated.
  std::string detokenize(std::span<const TokenId> tokens) const;
  std::vector<TokenId> number(long value) const;

 private:
  explicit Vocabulary(std::vector<std::string> tokens);
  std::vector<std::string> tokens_;
};

struct CorpusSpec {
  std::uint64_t seed = 1;
  std::size_t n_train = 4000;
  std::size_t n_eval = 200;
  std::size_t min_steps = 1;
  std::size_t max_steps = 3;
  long min_operand = 1;
  long max_operand = 9;
  long max_value = 20;
  // Upper bound on question + rationale tokens (max_seq minus prompt length).
  std::size_t max_tokens = 80;

  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

struct TaskInstance {
  std::string id;
  std::vector<TokenId> question;
  std::vector<TokenId> rationale;
  std::string answer;

  std::size_t token_count() const { return question.size() + rationale.size(); }
  std::vector<TokenId> full_sequence() const;
  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct Corpus {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval;
};

Corpus generate(const CorpusSpec& spec);

// Same problem with the "; #### N" terminator dropped, so the rationale ends
// right after the final step. Used to build the mixed-format base-model corpus.
TaskInstance without_answer_terminator(const TaskInstance& instance);

// Strips whitespace and leading zeros. Empty input stays empty.
std::string canonical_answer(std::string_view answer);
bool score(const std::optional<std::string>& predicted, std::string_view gold);

// Line-delimited JSON records: {"id", "question", "rationale", "answer"}.
void save_corpus(const std::filesystem::path& path, std::span<const TaskInstance> instances,
                 const nlohmann::json& header);
std::vector<TaskInstance> load_corpus(const std::filesystem::path& path);

}  // namespace pflow::tasks
