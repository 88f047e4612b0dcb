#pragma once

// Soft-prompt optimisation against a frozen TinyLm.
//
// The objective is the summed negative log-likelihood of the scored target
// tokens over every instance in a batch; only the prompt matrix moves.

#include "pflow/pretrain.hpp"
#include "pflow/soft_prompt.hpp"
#include "pflow/tiny_lm.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace pflow::tuning {

using lm::TokenId;
using lm::TrainingSequence;

enum class InitMode { random, text };
enum class Optimizer { sgd, adam };

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t prompt_len = 16;
  std::size_t epochs = 6;
  std::size_t batch_size = 8;
  std::uint64_t seed = 5;
  InitMode init_mode = InitMode::text;
  Optimizer optimizer = Optimizer::sgd;
  double init_std = 0.02;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Random mode: i.i.d. N(0, init_std²). Text mode: rows copy the embeddings of
// init_text, cycling when the text is shorter than the prompt.
SoftPrompt init_prompt(const TrainConfig& config, const lm::TinyLm& model,
                       std::optional<std::span<const TokenId>> init_text);

struct LossAndGradient {
  double loss = 0.0;
  tensor::Tensor gradient;  // l×d, same shape as the prompt
};

double prompt_loss(const lm::TinyLm& model, const SoftPrompt& prompt, const TrainingSequence& example);
LossAndGradient prompt_loss_and_gradient(const lm::TinyLm& model, const SoftPrompt& prompt,
                                         const TrainingSequence& example);

struct TrainResult {
  SoftPrompt prompt;
  std::vector<double> epoch_loss;  // mean per-instance L_PLM, summed in instance order
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, SoftPrompt last_finite, std::size_t epoch)
      : std::runtime_error(what), last_finite_(std::move(last_finite)), epoch_(epoch) {}
  const SoftPrompt& last_finite() const { return last_finite_; }
  std::size_t epoch() const { return epoch_; }

 private:
  SoftPrompt last_finite_;
  std::size_t epoch_;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

TrainResult train(const lm::TinyLm& model, std::span<const TrainingSequence> dataset, const TrainConfig& config,
                  const SoftPrompt& initial, const EpochCallback& on_epoch = {});

inline constexpr int kPromptFormatVersion = 1;

struct PromptCheckpoint {
  SoftPrompt prompt;
  nlohmann::json metadata;
};

void save_prompt(const std::filesystem::path& path, const SoftPrompt& prompt, const nlohmann::json& metadata);
PromptCheckpoint load_prompt(const std::filesystem::path& path);

}  // namespace pflow::tuning
