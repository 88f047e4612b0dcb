#include "pflow/run_config.hpp"

#include "pflow/artifacts.hpp"

namespace pflow::cli {

nlohmann::json default_config() {
  const auto& vocab = tasks::Vocabulary::standard();
  lm::ModelConfig model;
  model.vocab_size = vocab.size();
  tasks::CorpusSpec corpus;
  nlohmann::json corpus_json = corpus;
  corpus_json.erase("seed");
  corpus_json.erase("max_tokens");
  lm::PretrainConfig pretrain;
  nlohmann::json pretrain_json = pretrain;
  pretrain_json.erase("seed");
  pretrain_json["alt_terminator_fraction"] = 0.5;
  pretrain_json["context_fraction"] = 0.5;
  tuning::TrainConfig tune;
  nlohmann::json tune_json = tune;
  tune_json.erase("seed");
  tune_json["n_instances"] = 800;
  dpc::DpcConfig dpc;
  nlohmann::json dpc_json = dpc;
  dpc_json.erase("seed");
  return {{"seed", 7},
          {"workdir", "run"},
          {"workers", 1},
          {"corpus", corpus_json},
          {"model", model},
          {"pretrain", pretrain_json},
          {"tune", tune_json},
          {"dpc", dpc_json},
          {"analysis", {{"source", "eval"}, {"target", "generated"}, {"instances", {0, 1, 2}}}},
          {"eval",
           {{"n_instances", 0}, {"random_seeds", {1, 2, 3}}, {"calibrate", false}, {"calibration_instances", 100}}}};
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override '" + assignment + "' is not of the form key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) throw std::invalid_argument("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

RunConfig resolve_config(const nlohmann::json& file_config, std::span<const std::string> overrides) {
  nlohmann::json j = default_config();
  if (!file_config.is_null()) {
    if (!file_config.is_object()) throw std::invalid_argument("config file must hold a JSON object");
    j.merge_patch(file_config);
  }
  for (const auto& o : overrides) apply_override(j, o);

  const auto seed = j.at("seed").get<std::uint64_t>();
  const auto derive = [&](const char* block, std::uint64_t offset) {
    auto& b = j[block];
    if (!b.contains("seed")) b["seed"] = seed + offset;
  };
  derive("corpus", 0);
  derive("pretrain", 1);
  derive("tune", 2);
  derive("dpc", 3);
  auto& vocab_size = j["model"]["vocab_size"];
  if (vocab_size.is_null()) vocab_size = tasks::Vocabulary::standard().size();
  const auto max_seq = j["model"].at("max_seq").get<std::size_t>();
  const auto prompt_len = j["tune"].at("prompt_len").get<std::size_t>();
  if (prompt_len >= max_seq)
    throw std::invalid_argument("tune.prompt_len " + std::to_string(prompt_len) + " leaves no room in model.max_seq " +
                      std::to_string(max_seq));
  if (!j["corpus"].contains("max_tokens")) j["corpus"]["max_tokens"] = max_seq - prompt_len;

  RunConfig c;
  c.resolved = j;
  c.seed = seed;
  c.workdir = j.at("workdir").get<std::string>();
  c.workers = std::max<std::size_t>(1, j.at("workers").get<std::size_t>());
  c.corpus = j.at("corpus").get<tasks::CorpusSpec>();
  c.model = j.at("model").get<lm::ModelConfig>();
  c.pretrain = j.at("pretrain").get<lm::PretrainConfig>();
  c.alt_terminator_fraction = j["pretrain"].value("alt_terminator_fraction", 0.5);
  c.context_fraction = j["pretrain"].value("context_fraction", 0.5);
  c.tune = j.at("tune").get<tuning::TrainConfig>();
  c.tune_instances = j["tune"].value("n_instances", std::size_t{800});
  c.dpc = j.at("dpc").get<dpc::DpcConfig>();
  const auto& a = j.at("analysis");
  c.analysis.source = a.value("source", c.analysis.source);
  c.analysis.target = a.value("target", c.analysis.target);
  c.analysis.instances = a.value("instances", c.analysis.instances);
  const auto& e = j.at("eval");
  c.eval.n_instances = e.value("n_instances", c.eval.n_instances);
  c.eval.random_seeds = e.value("random_seeds", c.eval.random_seeds);
  c.eval.calibrate = e.value("calibrate", c.eval.calibrate);
  c.eval.calibration_instances = e.value("calibration_instances", c.eval.calibration_instances);

  c.corpus.validate();
  c.model.validate();
  c.tune.validate();
  c.dpc.validate();
  if (c.model.vocab_size != tasks::Vocabulary::standard().size())
    throw std::invalid_argument("model.vocab_size must equal the task vocabulary size (" +
                                std::to_string(tasks::Vocabulary::standard().size()) + ")");
  if (c.analysis.source != "eval" && c.analysis.source != "train")
    throw std::invalid_argument("analysis.source must be 'eval' or 'train'");
  if (c.analysis.target != "generated" && c.analysis.target != "gold")
    throw std::invalid_argument("analysis.target must be 'generated' or 'gold'");
  return c;
}

RunConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
  nlohmann::json file;
  if (!path.empty()) file = nlohmann::json::parse(read_text(path));
  return resolve_config(file, overrides);
}

std::string RunConfig::corpus_key() const { return hash_hex(resolved.at("corpus")); }

std::string RunConfig::base_key() const {
  return hash_hex({{"corpus", corpus_key()}, {"model", resolved.at("model")}, {"pretrain", resolved.at("pretrain")}});
}

std::string RunConfig::prompt_key() const {
  return hash_hex({{"base", base_key()}, {"tune", resolved.at("tune")}, {"eval_n", resolved["eval"]["n_instances"]}});
}

std::string RunConfig::run_key() const {
  return hash_hex({{"prompt", prompt_key()}, {"dpc", resolved.at("dpc")}, {"eval", resolved.at("eval")},
                   {"analysis", resolved.at("analysis")}});
}

}  // namespace pflow::cli
