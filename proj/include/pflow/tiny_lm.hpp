#pragma once

// Frozen decoder-only transformer with per-head attention capture.
//
// Layout: learned token + absolute position embeddings, pre-norm blocks with
// per-head query/key/value/output projections, GELU feed-forward, final norm
// and an untied output projection. Soft prompt rows are prepended to the
// token embeddings and receive positions 0..l-1 like any other slot.

#include "pflow/soft_prompt.hpp"
#include "pflow/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pflow::lm {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 0;
  std::size_t max_seq = 96;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

class SequenceTooLong : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Immutable parameter set. Tensor order is fixed by parameter_names().
class ModelWeights {
 public:
  static ModelWeights initialize(const ModelConfig& config, std::uint64_t seed);
  static ModelWeights from_tensors(const ModelConfig& config, std::vector<tensor::Tensor> tensors);

  static std::vector<std::string> parameter_names(const ModelConfig& config);
  static std::vector<tensor::Shape> parameter_shapes(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::span<const tensor::Tensor> tensors() const { return tensors_; }
  const tensor::Tensor& token_embedding() const { return tensors_[0]; }

  // FNV-1a over config, shapes and raw value bytes.
  std::uint64_t hash() const;

 private:
  ModelWeights(ModelConfig config, std::vector<tensor::Tensor> tensors)
      : config_(config), tensors_(std::move(tensors)) {}
  ModelConfig config_;
  std::vector<tensor::Tensor> tensors_;
};

struct ForwardOptions {
  bool track_prompt = false;
  bool track_attention = false;
  bool track_weights = false;
  // Only produce logits for the final position (generation).
  bool last_row_only = false;
  // Replaces attention probabilities before they are used downstream.
  // Intended for finite-difference probing; edited tensors are untracked.
  std::function<void(std::size_t layer, std::size_t head, tensor::Tensor& probs)> attention_edit;
};

struct ForwardPass {
  tensor::Graph graph;
  tensor::NodeId logits;
  std::vector<tensor::NodeId> attention;  // layer-major: layer * n_heads + head
  std::optional<tensor::NodeId> prompt;
  std::vector<tensor::NodeId> weights;
  std::size_t prompt_len = 0;
  std::size_t token_count = 0;
  std::size_t n_heads = 0;

  std::size_t total_len() const { return prompt_len + token_count; }
  tensor::NodeId attention_at(std::size_t layer, std::size_t head) const {
    return attention.at(layer * n_heads + head);
  }
};

// Attention probabilities per (layer, head), optionally with their gradients.
struct AttentionCapture {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<tensor::Tensor> probs;
  std::vector<tensor::Tensor> grads;  // empty unless captured after backward

  const tensor::Tensor& prob(std::size_t layer, std::size_t head) const { return probs.at(layer * n_heads + head); }
  const tensor::Tensor& grad(std::size_t layer, std::size_t head) const { return grads.at(layer * n_heads + head); }
  bool has_grads() const { return !grads.empty(); }
};

AttentionCapture capture_attention(const ForwardPass& pass, const tensor::Gradients* grads = nullptr);

enum class StopReason { stop_token, max_new, length_limit };

struct Generation {
  std::vector<TokenId> tokens;  // excludes the stop token
  StopReason reason = StopReason::max_new;
  std::vector<std::vector<double>> step_logits;  // filled when requested
};

ForwardPass run_forward(const ModelWeights& weights, std::span<const TokenId> tokens,
                        const SoftPrompt* prompt, const ForwardOptions& options = {});

class TinyLm {
 public:
  explicit TinyLm(ModelWeights weights);

  const ModelConfig& config() const { return weights_->config(); }
  const ModelWeights& weights() const { return *weights_; }

  ForwardPass forward(std::span<const TokenId> tokens, const SoftPrompt* prompt,
                      const ForwardOptions& options = {}) const {
    return run_forward(*weights_, tokens, prompt, options);
  }

  // Greedy decoding; ties go to the lowest token id. Halts on a stop token,
  // after max_new tokens, or when the sequence would no longer fit max_seq.
  Generation greedy_generate(std::span<const TokenId> prefix, const SoftPrompt* prompt, std::size_t max_new,
                             std::span<const TokenId> stop_tokens, bool record_logits = false) const;

 private:
  std::shared_ptr<const ModelWeights> weights_;
};

// Sum of -log P(tokens[k] | tokens[<k]) over the scored token indices k.
// Index k is read from the logits row at prompt_len + k - 1.
tensor::NodeId sequence_loss(tensor::Graph& graph, tensor::NodeId logits, std::span<const TokenId> tokens,
                             std::span<const std::size_t> scored, std::size_t prompt_len);

std::size_t argmax_lowest(std::span<const double> values);

// Checkpoint container: magic, format version, JSON header (config, tensor
// names and shapes, caller metadata), then little-endian float64 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelWeights weights;
  nlohmann::json metadata;
};

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& weights, const nlohmann::json& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pflow::lm
