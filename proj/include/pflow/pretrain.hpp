#pragma once

// Builds the frozen base model: Adam over every weight, then frozen.

#include "pflow/tiny_lm.hpp"

#include <nlohmann/json_fwd.hpp>

#include <functional>
#include <span>
#include <vector>

namespace pflow::lm {

// One teacher-forced example: token indices in `scored` are prediction targets.
struct TrainingSequence {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> scored;
};

struct PretrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 11;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainResult {
  ModelWeights weights;
  std::vector<double> epoch_loss;  // mean per-token loss
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

PretrainResult pretrain(const ModelConfig& config, std::span<const TrainingSequence> data,
                        const PretrainConfig& train, const EpochCallback& on_epoch = {});

}  // namespace pflow::lm
