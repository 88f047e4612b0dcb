#include "pflow/pretrain.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace pflow::lm {

using tensor::Tensor;

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
                     {"beta1", c.beta1},         {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
                     {"grad_clip", c.grad_clip}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
}

PretrainResult pretrain(const ModelConfig& config, std::span<const TrainingSequence> data,
                        const PretrainConfig& train, const EpochCallback& on_epoch) {
  if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
  if (train.batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  auto params = ModelWeights::initialize(config, train.seed);
  std::vector<Tensor> values(params.tensors().begin(), params.tensors().end());
  std::vector<Tensor> m, v;
  for (const auto& t : values) {
    m.push_back(Tensor::zeros(t.shape()));
    v.push_back(Tensor::zeros(t.shape()));
  }

  std::mt19937_64 rng(train.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  PretrainResult result{params, {}};

  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
      const auto current = ModelWeights::from_tensors(config, values);
      const std::size_t end = std::min(order.size(), start + train.batch_size);
      std::vector<Tensor> grads;
      for (const auto& t : values) grads.push_back(Tensor::zeros(t.shape()));
      std::size_t batch_tokens = 0;
      for (std::size_t b = start; b < end; ++b) batch_tokens += data[order[b]].scored.size();
      for (std::size_t b = start; b < end; ++b) {
        const auto& ex = data[order[b]];
        ForwardOptions opts;
        opts.track_weights = true;
        auto pass = run_forward(current, ex.tokens, nullptr, opts);
        const auto loss = sequence_loss(pass.graph, pass.logits, ex.tokens, ex.scored, 0);
        epoch_loss += pass.graph.value(loss).item();
        const auto g = pass.graph.backward(loss);
        for (std::size_t i = 0; i < values.size(); ++i) {
          if (!g.contains(pass.weights[i])) continue;
          auto dst = grads[i].mutable_values();
          const auto src = g.at(pass.weights[i]).values();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k] / static_cast<double>(batch_tokens);
        }
      }
      epoch_tokens += batch_tokens;

      if (train.grad_clip > 0) {
        double norm2 = 0.0;
        for (const auto& gt : grads)
          for (double x : gt.values()) norm2 += x * x;
        const double norm = std::sqrt(norm2);
        if (norm > train.grad_clip)
          for (auto& gt : grads)
            for (double& x : gt.mutable_values()) x *= train.grad_clip / norm;
      }

      ++step;
      const double bc1 = 1.0 - std::pow(train.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(train.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < values.size(); ++i) {
        auto p = values[i].mutable_values();
        auto mm = m[i].mutable_values();
        auto vv = v[i].mutable_values();
        const auto gg = grads[i].values();
        for (std::size_t k = 0; k < p.size(); ++k) {
          mm[k] = train.beta1 * mm[k] + (1 - train.beta1) * gg[k];
          vv[k] = train.beta2 * vv[k] + (1 - train.beta2) * gg[k] * gg[k];
          p[k] -= train.learning_rate * (mm[k] / bc1) / (std::sqrt(vv[k] / bc2) + train.adam_eps);
        }
        values[i].check_finite("pretrain update");
      }
    }
    const double mean = epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_tokens));
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  result.weights = ModelWeights::from_tensors(config, std::move(values));
  return result;
}

}  // namespace pflow::lm
