#pragma once

// Single structured-text (JSON) run configuration with dotted-key overrides.
//
// Resolution order: built-in defaults, then the config file, then
// `key.path=value` overrides. Per-stage seeds that are not given explicitly
// are derived from the top-level seed. The resolved document is what every
// artifact echoes.

#include "pflow/dpc.hpp"
#include "pflow/pretrain.hpp"
#include "pflow/prompt_tuning.hpp"
#include "pflow/task_gen.hpp"
#include "pflow/tiny_lm.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pflow::cli {

inline constexpr int kArtifactFormatVersion = 1;

struct AnalysisSettings {
  std::string source = "eval";   // eval | train
  std::string target = "generated";  // generated | gold
  std::vector<std::size_t> instances{0, 1, 2};
};

struct EvalSettings {
  std::size_t n_instances = 0;  // 0: the whole eval split
  std::vector<std::uint64_t> random_seeds{1, 2, 3};
  bool calibrate = false;
  std::size_t calibration_instances = 100;
};

struct RunConfig {
  nlohmann::json resolved;
  std::uint64_t seed = 0;
  std::filesystem::path workdir;
  std::size_t workers = 1;

  tasks::CorpusSpec corpus;
  lm::ModelConfig model;
  lm::PretrainConfig pretrain;
  double alt_terminator_fraction = 0.5;
  // Fraction of base-model sequences preceded by tune.prompt_len context
  // tokens from another instance (no loss on them).
  double context_fraction = 0.5;
  tuning::TrainConfig tune;
  std::size_t tune_instances = 800;
  dpc::DpcConfig dpc;
  AnalysisSettings analysis;
  EvalSettings eval;

  // Content-addressed artifact keys; each covers every setting upstream of it.
  std::string corpus_key() const;
  std::string base_key() const;
  std::string prompt_key() const;
  std::string run_key() const;
};

nlohmann::json default_config();

// Applies "a.b.c=value"; the value is parsed as JSON when possible, else kept
// as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

RunConfig resolve_config(const nlohmann::json& file_config, std::span<const std::string> overrides);
RunConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides);

}  // namespace pflow::cli
