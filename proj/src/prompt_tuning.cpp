#include "pflow/prompt_tuning.hpp"

#include "pflow/artifacts.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace pflow::tuning {

using tensor::Tensor;

NLOHMANN_JSON_SERIALIZE_ENUM(InitMode, {{InitMode::random, "random"}, {InitMode::text, "text"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Optimizer, {{Optimizer::sgd, "sgd"}, {Optimizer::adam, "adam"}})

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("TrainConfig: learning_rate must be finite and >= 0");
  if (prompt_len < 1) throw std::invalid_argument("TrainConfig: prompt_len must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"prompt_len", c.prompt_len}, {"epochs", c.epochs},
                     {"batch_size", c.batch_size},       {"seed", c.seed},             {"init_mode", c.init_mode},
                     {"optimizer", c.optimizer},         {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.prompt_len = j.value("prompt_len", c.prompt_len);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.init_mode = j.value("init_mode", c.init_mode);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.init_std = j.value("init_std", c.init_std);
}

SoftPrompt init_prompt(const TrainConfig& config, const lm::TinyLm& model,
                       std::optional<std::span<const TokenId>> init_text) {
  config.validate();
  const std::size_t l = config.prompt_len;
  const std::size_t d = model.config().d_model;
  std::vector<double> data(l * d);
  if (config.init_mode == InitMode::random) {
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, config.init_std);
    for (double& x : data) x = normal(rng);
  } else {
    if (!init_text || init_text->empty()) throw std::invalid_argument("init_prompt: text mode requires init_text");
    const auto& emb = model.weights().token_embedding();
    for (std::size_t i = 0; i < l; ++i) {
      const auto tok = (*init_text)[i % init_text->size()];
      if (tok < 0 || static_cast<std::size_t>(tok) >= emb.rows())
        throw std::out_of_range("init_prompt: token " + std::to_string(tok) + " outside vocabulary");
      for (std::size_t j = 0; j < d; ++j) data[i * d + j] = emb(static_cast<std::size_t>(tok), j);
    }
  }
  return SoftPrompt(Tensor::matrix(l, d, std::move(data)));
}

double prompt_loss(const lm::TinyLm& model, const SoftPrompt& prompt, const TrainingSequence& example) {
  auto pass = model.forward(example.tokens, &prompt);
  const auto loss = lm::sequence_loss(pass.graph, pass.logits, example.tokens, example.scored, prompt.length());
  return pass.graph.value(loss).item();
}

LossAndGradient prompt_loss_and_gradient(const lm::TinyLm& model, const SoftPrompt& prompt,
                                         const TrainingSequence& example) {
  lm::ForwardOptions opts;
  opts.track_prompt = true;
  auto pass = model.forward(example.tokens, &prompt, opts);
  const auto loss = lm::sequence_loss(pass.graph, pass.logits, example.tokens, example.scored, prompt.length());
  const auto grads = pass.graph.backward(loss);
  return {pass.graph.value(loss).item(), grads.at(*pass.prompt)};
}

TrainResult train(const lm::TinyLm& model, std::span<const TrainingSequence> dataset, const TrainConfig& config,
                  const SoftPrompt& initial, const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (initial.length() != config.prompt_len)
    throw std::invalid_argument("train: initial prompt has " + std::to_string(initial.length()) +
                                " rows, config expects " + std::to_string(config.prompt_len));

  Tensor current = initial.vectors();
  Tensor adam_m = Tensor::zeros(current.shape());
  Tensor adam_v = Tensor::zeros(current.shape());
  std::size_t step = 0;

  std::mt19937_64 rng(config.seed ^ 0x5bd1e995ULL);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> instance_loss(dataset.size());

  TrainResult result{initial, {}};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const SoftPrompt prompt(current);
      Tensor grad = Tensor::zeros(current.shape());
      try {
        for (std::size_t b = start; b < end; ++b) {
          const auto lg = prompt_loss_and_gradient(model, prompt, dataset[order[b]]);
          if (!std::isfinite(lg.loss)) throw tensor::NonFiniteError("non-finite loss");
          instance_loss[order[b]] = lg.loss;
          auto g = grad.mutable_values();
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += lg.gradient.values()[k];
        }
      } catch (const tensor::NonFiniteError& e) {
        throw TrainingDiverged(std::string("train: diverged in epoch ") + std::to_string(epoch) + ": " + e.what(),
                               prompt, epoch);
      }

      auto p = current.mutable_values();
      const auto g = grad.values();
      if (config.optimizer == Optimizer::sgd) {
        for (std::size_t k = 0; k < p.size(); ++k) p[k] -= config.learning_rate * g[k];
      } else {
        ++step;
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
        auto m = adam_m.mutable_values();
        auto v = adam_v.mutable_values();
        for (std::size_t k = 0; k < p.size(); ++k) {
          m[k] = b1 * m[k] + (1 - b1) * g[k];
          v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k];
          p[k] -= config.learning_rate * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
        }
      }
      try {
        current.check_finite("prompt update");
      } catch (const tensor::NonFiniteError& e) {
        throw TrainingDiverged(std::string("train: diverged in epoch ") + std::to_string(epoch) + ": " + e.what(),
                               prompt, epoch);
      }
    }
    double total = 0.0;
    for (double x : instance_loss) total += x;
    const double mean = total / static_cast<double>(dataset.size());
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  result.prompt = SoftPrompt(std::move(current));
  return result;
}

void save_prompt(const std::filesystem::path& path, const SoftPrompt& prompt, const nlohmann::json& metadata) {
  nlohmann::json j;
  j["format_version"] = kPromptFormatVersion;
  j["prompt_len"] = prompt.length();
  j["d"] = prompt.dim();
  std::vector<double> values(prompt.vectors().values().begin(), prompt.vectors().values().end());
  j["values"] = values;
  j["metadata"] = metadata;
  write_text_atomically(path, j.dump(1) + "\n");
}

PromptCheckpoint load_prompt(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  if (j.at("format_version").get<int>() != kPromptFormatVersion)
    throw std::runtime_error("prompt checkpoint: unsupported format version in " + path.string());
  const auto l = j.at("prompt_len").get<std::size_t>();
  const auto d = j.at("d").get<std::size_t>();
  auto values = j.at("values").get<std::vector<double>>();
  return {SoftPrompt(Tensor::matrix(l, d, std::move(values))), j.value("metadata", nlohmann::json::object())};
}

}  // namespace pflow::tuning
