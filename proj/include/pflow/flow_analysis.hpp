#pragma once

// Saliency-based information-flow diagnostics over prompt / question /
// rationale segments.
//
// Orientation: every saliency matrix is stored as S(source, target), where
// source is the attended-to (key) position and target the attending (query)
// position. With causal attention, S(i, j) is zero whenever i > j.

#include "pflow/soft_prompt.hpp"
#include "pflow/tensor.hpp"
#include "pflow/tiny_lm.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pflow::flow {

using lm::TokenId;

// Inclusive index range [first, last] over absolute sequence positions.
struct Span {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t count() const { return last - first + 1; }
  bool contains(std::size_t i) const { return i >= first && i <= last; }
  friend bool operator==(const Span&, const Span&) = default;
};

class MissingRationale : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Positions are absolute: prompt slots occupy [0, prompt_len), tokens follow.
struct SegmentedSequence {
  std::vector<TokenId> tokens;  // question tokens followed by rationale tokens
  std::size_t prompt_len = 0;
  Span prompt;
  Span question;
  Span rationale;
  std::size_t r_mid = 0;

  // r_mid = r_s + floor(split * (r_e - r_s)); split 0.5 gives floor((r_s + r_e) / 2).
  static SegmentedSequence build(std::span<const TokenId> question, std::span<const TokenId> rationale,
                                 std::size_t prompt_len, double split = 0.5);

  std::size_t total_len() const { return prompt_len + tokens.size(); }
  // Token indices (into `tokens`) of the rationale, for sequence_loss.
  std::vector<std::size_t> rationale_targets() const;
  void validate() const;
};

struct SaliencyStack {
  std::vector<tensor::Tensor> layers;  // each (l+n)×(l+n), S(source, target)
  std::string instance_id;
  std::string loss_definition;

  std::size_t n_layers() const { return layers.size(); }
  std::size_t size() const { return layers.empty() ? 0 : layers.front().rows(); }
  const tensor::Tensor& layer(std::size_t l) const { return layers.at(l); }
  SaliencyStack scaled(double factor) const;
};

// S(source, target) = | sum_h A_h(target, source) * dL/dA_h(target, source) |
SaliencyStack saliency_from_capture(const lm::AttentionCapture& capture);

// Forward + backward of the summed rationale cross-entropy, where the targets
// are the rationale tokens already present in `sequence`.
SaliencyStack compute_saliency(const lm::TinyLm& model, const SegmentedSequence& sequence, const SoftPrompt& prompt,
                               std::string loss_definition = "self");

double region_flow(const SaliencyStack& stack, std::size_t layer, Span source, Span target);

// How prompt-token accumulation reads the matrix.
//   prompt_as_source: score_i = sum_j S(i, j) (prompt token i feeding q/r tokens)
//   prompt_as_target: score_i = sum_j S(j, i)
enum class Orientation { prompt_as_source, prompt_as_target };

struct AccumulationScores {
  std::vector<std::size_t> layers;
  std::vector<std::vector<double>> per_layer;  // [layer index in `layers`][prompt token]
  std::vector<double> total;                    // summed over `layers`
};

// 0-based layers 1..min(9, L-1); a single-layer model uses layer 0.
std::vector<std::size_t> default_shallow_layers(std::size_t n_layers);

AccumulationScores accumulation_scores(const SaliencyStack& stack, std::span<const std::size_t> shallow_layers,
                                       const SegmentedSequence& sequence,
                                       Orientation orientation = Orientation::prompt_as_source);

struct Accumulation {
  std::vector<std::size_t> flagged;  // absolute positions in the prompt span
  std::size_t key_token = 0;         // absolute position of the argmax score
};

// Flags tokens whose score strictly exceeds alpha × mean(score). `prompt_start`
// is added to prompt-relative indices.
Accumulation detect_accumulation(std::span<const double> scores, double alpha, std::size_t prompt_start = 0);

double pattern_change_score(const SaliencyStack& stack, const SegmentedSequence& sequence);

struct AffectedRatio {
  std::vector<double> s_pr_token;  // one per rationale position r_s..r_e
  double beta = 0.0;
  double ratio = 0.0;
};

AffectedRatio affected_ratio(const SaliencyStack& stack, const SegmentedSequence& sequence);

struct FlowConfig {
  double alpha = 10.0;
  std::vector<std::size_t> shallow_layers;  // empty: default_shallow_layers(L)
  Orientation orientation = Orientation::prompt_as_source;
};

struct FlowReport {
  std::vector<double> s_pq;  // per layer
  std::vector<double> s_pr;  // per layer
  AccumulationScores accumulation;
  Accumulation i_acc;
  double s_ifp = 0.0;
  AffectedRatio affected;

  double ratio_r() const { return affected.ratio; }
  std::size_t key_token() const { return i_acc.key_token; }
};

FlowReport analyze(const SaliencyStack& stack, const SegmentedSequence& sequence, const FlowConfig& config = {});

nlohmann::json to_json(const FlowReport& report);
nlohmann::json to_json(const SegmentedSequence& sequence);
nlohmann::json saliency_dump(const SaliencyStack& stack, const SegmentedSequence& sequence);
SaliencyStack stack_from_dump(const nlohmann::json& dump);
// "layer,i,j,value" rows for every layer and cell.
std::string heatmap_csv(const SaliencyStack& stack);

}  // namespace pflow::flow
