#pragma once

// Dynamic Prompt Corruption: decide per instance whether the soft prompt is
// steering the latter half of the rationale, and if so re-run inference with
// the accumulation token erased and the smallest prompt entries sparsified.

#include "pflow/flow_analysis.hpp"
#include "pflow/soft_prompt.hpp"
#include "pflow/task_gen.hpp"
#include "pflow/tiny_lm.hpp"

#include <nlohmann/json_fwd.hpp>

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pflow::dpc {

using lm::TokenId;

enum class Mode { off, dpc, all_corruption, random_corruption };
enum class SparsifyRule { global_magnitude, per_row_magnitude, global_signed };

std::string mode_name(Mode mode);
Mode parse_mode(const std::string& name);

struct DpcConfig {
  double alpha = 10.0;
  double gamma_percent = 10.0;
  double ratio_threshold = 0.5;
  std::vector<std::size_t> shallow_layers;  // empty: flow::default_shallow_layers
  Mode mode = Mode::dpc;
  std::uint64_t seed = 17;  // random_corruption position draws
  double mask_factor = 0.0;
  SparsifyRule sparsify = SparsifyRule::global_magnitude;
  // Conjunctive trigger: also require s_ifp > ifp_threshold.
  bool use_ifp_trigger = false;
  double ifp_threshold = 0.0;
  flow::Orientation orientation = flow::Orientation::prompt_as_source;
  double rationale_split = 0.5;
  std::size_t max_new = 48;

  void validate() const;
  flow::FlowConfig flow_config() const;
};

void to_json(nlohmann::json& j, const DpcConfig& c);
void from_json(const nlohmann::json& j, DpcConfig& c);

bool dynamic_trigger(const flow::FlowReport& report, const DpcConfig& config);

struct Entry {
  std::size_t row = 0;
  std::size_t col = 0;
  friend auto operator<=>(const Entry&, const Entry&) = default;
};

struct CorruptionPlan {
  std::size_t key_index = 0;        // prompt row scaled by mask_factor
  std::vector<Entry> zeroed_entries;  // never in row key_index
  double mask_factor = 0.0;
};

// Number of non-key entries the global rule zeroes: floor(Γ/100 · (l-1)·d).
std::size_t sparsified_count(std::size_t prompt_len, std::size_t dim, double gamma_percent);

CorruptionPlan plan_corruption(const SoftPrompt& prompt, std::size_t key_index, const DpcConfig& config);
SoftPrompt apply_corruption(const SoftPrompt& prompt, const CorruptionPlan& plan);
std::pair<SoftPrompt, CorruptionPlan> corrupt_prompt(const SoftPrompt& prompt, std::size_t key_index,
                                                     const DpcConfig& config);
// key index taken from report.key_token() relative to the prompt start (0).
std::pair<SoftPrompt, CorruptionPlan> corrupt_prompt(const SoftPrompt& prompt, const flow::FlowReport& report,
                                                     const DpcConfig& config);

// Text after the last "####", whitespace-normalised; nullopt if absent or empty.
std::optional<std::string> extract_answer(std::span<const TokenId> output, const tasks::Vocabulary& vocab);

enum class TraceStatus { ok, analysis_error };

struct FirstPass {
  lm::Generation generation;
  std::optional<flow::SegmentedSequence> sequence;
  std::optional<flow::FlowReport> report;
  std::string analysis_error;
};

struct PipelineTrace {
  std::string instance_id;
  Mode mode = Mode::off;
  TraceStatus status = TraceStatus::ok;
  std::string error;
  std::vector<TokenId> pass1;
  std::optional<flow::FlowReport> report;
  bool triggered = false;
  std::optional<CorruptionPlan> plan;
  std::optional<std::vector<TokenId>> pass2;
  std::optional<std::string> answer_pass1;
  std::optional<std::string> answer_pass2;
  std::optional<std::string> final_answer;
  std::string gold;
  bool correct = false;
};

// Pass 1: greedy rationale with the intact prompt; when `analyze` is set, the
// saliency stack over the completed sequence and its FlowReport.
FirstPass first_pass(const lm::TinyLm& model, const SoftPrompt& prompt, const tasks::TaskInstance& instance,
                     const DpcConfig& config, bool analyze);

// Trigger / corrupt / regenerate according to config.mode.
PipelineTrace complete_pipeline(const lm::TinyLm& model, const SoftPrompt& prompt,
                                const tasks::TaskInstance& instance, const FirstPass& first, const DpcConfig& config);

PipelineTrace run_pipeline(const lm::TinyLm& model, const SoftPrompt& prompt, const tasks::TaskInstance& instance,
                           const DpcConfig& config);

nlohmann::json to_json(const PipelineTrace& trace, const tasks::Vocabulary& vocab);

struct ModeMetrics {
  std::string mode;
  std::size_t instances = 0;
  std::size_t correct = 0;
  std::size_t triggered = 0;
  std::size_t errors = 0;
  double accuracy() const { return instances ? static_cast<double>(correct) / static_cast<double>(instances) : 0.0; }
  double trigger_rate() const {
    return instances ? static_cast<double>(triggered) / static_cast<double>(instances) : 0.0;
  }
};

ModeMetrics summarize(std::string mode, std::span<const PipelineTrace> traces);
nlohmann::json to_json(const ModeMetrics& metrics);

// Number of instances whose report would trigger at each threshold.
std::vector<std::size_t> trigger_counts(std::span<const flow::FlowReport> reports, const DpcConfig& config,
                                        std::span<const double> thresholds);

// Threshold on the grid maximising DPC accuracy over precomputed first passes
// (ties go to the highest threshold, i.e. the fewest interventions).
double calibrate_threshold(const lm::TinyLm& model, const SoftPrompt& prompt,
                           std::span<const tasks::TaskInstance> instances, std::span<const FirstPass> first,
                           const DpcConfig& config, std::span<const double> grid);

}  // namespace pflow::dpc
