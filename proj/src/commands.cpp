#include "pflow/commands.hpp"

#include "pflow/artifacts.hpp"
#include "pflow/flow_analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

namespace pflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads; results keep index order.
template <typename Fn>
auto parallel_map(std::size_t n, std::size_t workers, Fn fn) {
  using R = decltype(fn(std::size_t{}));
  std::vector<std::optional<R>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  const auto run = [&](std::size_t worker) {
    for (std::size_t i = worker; i < n; i += workers) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  std::vector<R> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

void require(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact(path);
}

json artifact_header(const RunConfig& config, const std::string& kind) {
  return {{"format_version", kArtifactFormatVersion}, {"kind", kind}, {"seed", config.seed}, {"config", config.resolved}};
}

std::vector<lm::TrainingSequence> training_sequences(std::span<const tasks::TaskInstance> instances) {
  std::vector<lm::TrainingSequence> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    lm::TrainingSequence s;
    s.tokens = inst.full_sequence();
    for (std::size_t k = inst.question.size(); k < s.tokens.size(); ++k) s.scored.push_back(k);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<tasks::TaskInstance> eval_instances(const RunConfig& config, const ArtifactPaths& paths) {
  require(paths.eval_corpus);
  auto all = tasks::load_corpus(paths.eval_corpus);
  if (config.eval.n_instances > 0 && config.eval.n_instances < all.size()) all.resize(config.eval.n_instances);
  return all;
}

lm::TinyLm load_base(const ArtifactPaths& paths) {
  require(paths.base_checkpoint);
  return lm::TinyLm(lm::load_checkpoint(paths.base_checkpoint).weights);
}

SoftPrompt load_tuned_prompt(const ArtifactPaths& paths) {
  require(paths.prompt);
  return tuning::load_prompt(paths.prompt).prompt;
}

std::string jsonl(const json& header, std::span<const json> records) {
  std::string out = json{{"header", header}}.dump() + "\n";
  for (const auto& r : records) out += r.dump() + "\n";
  return out;
}

std::vector<json> trace_records(std::span<const dpc::PipelineTrace> traces) {
  std::vector<json> out;
  for (const auto& t : traces) out.push_back(dpc::to_json(t, tasks::Vocabulary::standard()));
  return out;
}

std::string percent(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * x << '%';
  return os.str();
}

std::vector<double> threshold_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 20; ++i) g.push_back(i / 20.0);
  return g;
}

}  // namespace

fs::path ArtifactPaths::traces(const std::string& mode) const { return run_prefix.string() + "-" + mode + ".traces.jsonl"; }
fs::path ArtifactPaths::metrics(const std::string& mode) const { return run_prefix.string() + "-" + mode + ".metrics.json"; }

ArtifactPaths artifact_paths(const RunConfig& config) {
  const auto& dir = config.workdir;
  ArtifactPaths p;
  const auto ck = config.corpus_key();
  p.train_corpus = dir / ("corpus-" + ck + ".train.jsonl");
  p.eval_corpus = dir / ("corpus-" + ck + ".eval.jsonl");
  const auto bk = config.base_key();
  p.base_checkpoint = dir / ("base-" + bk + ".ckpt");
  p.base_summary = dir / ("base-" + bk + ".summary.json");
  p.prompt = dir / ("prompt-" + config.prompt_key() + ".json");
  const auto rk = config.run_key();
  p.analysis_dir = dir / ("analysis-" + rk);
  p.eval_report = dir / ("eval-" + rk + ".json");
  p.run_prefix = dir / ("dpc-" + rk);
  return p;
}

// ---------------------------------------------------------------------------

int gen_data(const RunConfig& config, std::ostream& log) {
  const auto paths = artifact_paths(config);
  const auto corpus = tasks::generate(config.corpus);
  const auto header = artifact_header(config, "corpus");
  tasks::save_corpus(paths.train_corpus, corpus.train, header);
  tasks::save_corpus(paths.eval_corpus, corpus.eval, header);
  log << "gen-data: " << corpus.train.size() << " train -> " << paths.train_corpus.string() << "\n"
      << "gen-data: " << corpus.eval.size() << " eval -> " << paths.eval_corpus.string() << "\n";
  return 0;
}

int pretrain(const RunConfig& config, std::ostream& log) {
  const auto paths = artifact_paths(config);
  require(paths.train_corpus);
  const auto train = tasks::load_corpus(paths.train_corpus);

  // A fraction of the base corpus ends without the "#### N" line, so the
  // frozen model only partially follows the answer format on its own.
  std::mt19937_64 rng(config.pretrain.seed ^ 0xa5a5a5a5ULL);
  std::bernoulli_distribution alt(config.alt_terminator_fraction);
  std::vector<tasks::TaskInstance> mixed;
  mixed.reserve(train.size());
  for (const auto& inst : train) mixed.push_back(alt(rng) ? tasks::without_answer_terminator(inst) : inst);
  auto data = training_sequences(mixed);

  // Some sequences sit behind prompt_len tokens of unrelated context, so the
  // positions a soft prompt pushes the text into are not unseen.
  std::bernoulli_distribution with_context(config.context_fraction);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const std::size_t l = config.tune.prompt_len;
  for (auto& seq : data) {
    if (!with_context(rng)) continue;
    const auto& other = mixed[pick(rng)].full_sequence();
    std::vector<lm::TokenId> tokens;
    const std::size_t start = other.size() > l ? other.size() - l : 0;
    for (std::size_t k = 0; k < l; ++k) tokens.push_back(other[(start + k) % other.size()]);
    tokens.insert(tokens.end(), seq.tokens.begin(), seq.tokens.end());
    for (auto& k : seq.scored) k += l;
    seq.tokens = std::move(tokens);
  }

  const auto result = lm::pretrain(config.model, data, config.pretrain, [&](std::size_t epoch, double loss) {
    log << "pretrain: epoch " << epoch + 1 << "/" << config.pretrain.epochs << " mean token loss " << loss << "\n";
  });
  auto meta = artifact_header(config, "base_model");
  meta["epoch_loss"] = result.epoch_loss;
  lm::save_checkpoint(paths.base_checkpoint, result.weights, meta);

  // Pretrained-model accuracy (no soft prompt) on the eval split.
  const lm::TinyLm model(result.weights);
  const auto evals = eval_instances(config, paths);
  const auto& vocab = tasks::Vocabulary::standard();
  const lm::TokenId stop[] = {vocab.eos()};
  const auto correct = parallel_map(evals.size(), config.workers, [&](std::size_t i) {
    const auto gen = model.greedy_generate(evals[i].question, nullptr, config.dpc.max_new, stop);
    return tasks::score(dpc::extract_answer(gen.tokens, vocab), evals[i].answer) ? 1 : 0;
  });
  const double acc =
      evals.empty() ? 0.0 : static_cast<double>(std::accumulate(correct.begin(), correct.end(), 0)) / evals.size();
  auto summary = artifact_header(config, "base_summary");
  summary["epoch_loss"] = result.epoch_loss;
  summary["eval_instances"] = evals.size();
  summary["eval_accuracy"] = acc;
  summary["weights_hash"] = result.weights.hash();
  write_text_atomically(paths.base_summary, summary.dump(1) + "\n");
  log << "pretrain: base model accuracy " << percent(acc) << " on " << evals.size() << " eval instances\n"
      << "pretrain: checkpoint -> " << paths.base_checkpoint.string() << "\n";
  return 0;
}

int tune(const RunConfig& config, std::ostream& log) {
  const auto paths = artifact_paths(config);
  require(paths.train_corpus);
  const auto model = load_base(paths);
  const auto weights_hash = model.weights().hash();
  auto train = tasks::load_corpus(paths.train_corpus);
  if (train.empty()) throw std::runtime_error("tune: empty training corpus");
  if (config.tune_instances > 0 && config.tune_instances < train.size()) train.resize(config.tune_instances);
  const auto data = training_sequences(train);

  // The tail of a worked example: "... ; #### N <eos>".
  const auto example = train.front().full_sequence();
  std::vector<lm::TokenId> init_text(
      example.end() - static_cast<std::ptrdiff_t>(std::min(example.size(), config.tune.prompt_len)), example.end());
  const auto initial = tuning::init_prompt(config.tune, model,
                                           config.tune.init_mode == tuning::InitMode::text
                                               ? std::optional<std::span<const lm::TokenId>>(init_text)
                                               : std::nullopt);
  const auto result = tuning::train(model, data, config.tune, initial, [&](std::size_t epoch, double loss) {
    log << "tune: epoch " << epoch + 1 << "/" << config.tune.epochs << " mean L_PLM " << loss << "\n";
  });
  if (model.weights().hash() != weights_hash) throw std::logic_error("tune: base weights changed");

  const auto evals = eval_instances(config, paths);
  dpc::DpcConfig off = config.dpc;
  off.mode = dpc::Mode::off;
  const auto traces = parallel_map(evals.size(), config.workers, [&](std::size_t i) {
    return dpc::run_pipeline(model, result.prompt, evals[i], off);
  });
  const auto metrics = dpc::summarize("off", traces);

  auto meta = artifact_header(config, "soft_prompt");
  meta["train_config"] = config.tune;
  meta["init"] = {{"mode", config.tune.init_mode == tuning::InitMode::text ? "text" : "random"},
                  {"text", config.tune.init_mode == tuning::InitMode::text
                               ? json(tasks::Vocabulary::standard().detokenize(init_text))
                               : json()}};
  meta["epoch_loss"] = result.epoch_loss;
  meta["base_weights_hash"] = weights_hash;
  meta["eval_instances"] = evals.size();
  meta["eval_accuracy"] = metrics.accuracy();
  tuning::save_prompt(paths.prompt, result.prompt, meta);
  log << "tune: prompt-tuned accuracy " << percent(metrics.accuracy()) << " on " << evals.size()
      << " eval instances\n"
      << "tune: prompt -> " << paths.prompt.string() << "\n";
  return 0;
}

int analyze(const RunConfig& config, std::ostream& log) {
  const auto paths = artifact_paths(config);
  const auto corpus_path = config.analysis.source == "train" ? paths.train_corpus : paths.eval_corpus;
  require(corpus_path);
  const auto model = load_base(paths);
  const auto prompt = load_tuned_prompt(paths);
  const auto instances = tasks::load_corpus(corpus_path);
  const auto& vocab = tasks::Vocabulary::standard();
  const lm::TokenId stop[] = {vocab.eos()};

  for (auto index : config.analysis.instances) {
    if (index >= instances.size())
      throw std::out_of_range("analyze: instance index " + std::to_string(index) + " outside corpus of " +
                              std::to_string(instances.size()));
    const auto& inst = instances[index];
    std::vector<lm::TokenId> rationale;
    if (config.analysis.target == "gold") {
      rationale = inst.rationale;
    } else {
      rationale = model.greedy_generate(inst.question, &prompt, config.dpc.max_new, stop).tokens;
    }
    // Throws MissingRationale when there is nothing to analyse.
    const auto seq = flow::SegmentedSequence::build(inst.question, rationale, prompt.length(),
                                                    config.dpc.rationale_split);
    auto stack = flow::compute_saliency(model, seq, prompt, config.analysis.target == "gold" ? "gold" : "self");
    stack.instance_id = inst.id;
    const auto report = flow::analyze(stack, seq, config.dpc.flow_config());

    auto dump = flow::saliency_dump(stack, seq);
    dump["header"] = artifact_header(config, "saliency_dump");
    write_text_atomically(paths.analysis_dir / (inst.id + ".saliency.json"), dump.dump() + "\n");
    auto rec = artifact_header(config, "flow_report");
    rec["instance_id"] = inst.id;
    rec["segments"] = flow::to_json(seq);
    rec["text"] = vocab.detokenize(seq.tokens);
    rec["report"] = flow::to_json(report);
    rec["triggered"] = dpc::dynamic_trigger(report, config.dpc);
    write_text_atomically(paths.analysis_dir / (inst.id + ".flow.json"), rec.dump(1) + "\n");
    log << "analyze: " << inst.id << " ratio_r=" << report.ratio_r() << " s_ifp=" << report.s_ifp
        << " key_token=" << report.key_token() << " i_acc=" << report.i_acc.flagged.size() << "\n";
  }
  log << "analyze: outputs -> " << paths.analysis_dir.string() << "\n";
  return 0;
}

int dpc_run(const RunConfig& config, std::ostream& log) {
  const auto paths = artifact_paths(config);
  const auto model = load_base(paths);
  const auto prompt = load_tuned_prompt(paths);
  const auto evals = eval_instances(config, paths);
  const auto traces = parallel_map(evals.size(), config.workers, [&](std::size_t i) {
    return dpc::run_pipeline(model, prompt, evals[i], config.dpc);
  });
  const auto mode = dpc::mode_name(config.dpc.mode);
  const auto metrics = dpc::summarize(mode, traces);
  const auto records = trace_records(traces);
  write_text_atomically(paths.traces(mode), jsonl(artifact_header(config, "traces"), records));
  auto m = artifact_header(config, "metrics");
  m["metrics"] = dpc::to_json(metrics);
  write_text_atomically(paths.metrics(mode), m.dump(1) + "\n");
  log << "dpc-run: mode " << mode << " accuracy " << percent(metrics.accuracy()) << " triggered "
      << metrics.triggered << "/" << metrics.instances << "\n"
      << "dpc-run: traces -> " << paths.traces(mode).string() << "\n";
  return 0;
}

int eval(const RunConfig& config, std::ostream& log) {
  const auto paths = artifact_paths(config);
  const auto model = load_base(paths);
  const auto prompt = load_tuned_prompt(paths);
  const auto evals = eval_instances(config, paths);

  dpc::DpcConfig cfg = config.dpc;
  json calibration;
  if (config.eval.calibrate) {
    require(paths.train_corpus);
    auto held = tasks::load_corpus(paths.train_corpus);
    const std::size_t start = std::min(held.size(), config.tune_instances);
    const std::size_t end = std::min(held.size(), start + config.eval.calibration_instances);
    std::vector<tasks::TaskInstance> validation(held.begin() + static_cast<std::ptrdiff_t>(start),
                                                held.begin() + static_cast<std::ptrdiff_t>(end));
    const auto firsts = parallel_map(validation.size(), config.workers, [&](std::size_t i) {
      return dpc::first_pass(model, prompt, validation[i], cfg, true);
    });
    const auto grid = threshold_grid();
    cfg.ratio_threshold = dpc::calibrate_threshold(model, prompt, validation, firsts, cfg, grid);
    calibration = {{"validation_instances", validation.size()}, {"ratio_threshold", cfg.ratio_threshold}};
    log << "eval: calibrated ratio_threshold " << cfg.ratio_threshold << " on " << validation.size()
        << " held-out training instances\n";
  }

  const auto firsts = parallel_map(evals.size(), config.workers, [&](std::size_t i) {
    return dpc::first_pass(model, prompt, evals[i], cfg, true);
  });
  const auto run_mode = [&](dpc::DpcConfig c) {
    return parallel_map(evals.size(), config.workers,
                        [&](std::size_t i) { return dpc::complete_pipeline(model, prompt, evals[i], firsts[i], c); });
  };

  json modes = json::array();
  const auto emit = [&](const std::string& label, const std::vector<dpc::PipelineTrace>& traces) {
    const auto metrics = dpc::summarize(label, traces);
    write_text_atomically(paths.traces(label), jsonl(artifact_header(config, "traces"), trace_records(traces)));
    log << "eval: " << std::left << std::setw(24) << label << " accuracy " << percent(metrics.accuracy())
        << "  triggered " << metrics.triggered << "/" << metrics.instances << "\n";
    return metrics;
  };

  for (auto mode : {dpc::Mode::off, dpc::Mode::dpc, dpc::Mode::all_corruption}) {
    dpc::DpcConfig c = cfg;
    c.mode = mode;
    modes.push_back(dpc::to_json(emit(dpc::mode_name(mode), run_mode(c))));
  }
  {
    json seeds = json::array();
    double total = 0.0;
    std::size_t triggered = 0;
    for (auto seed : config.eval.random_seeds) {
      dpc::DpcConfig c = cfg;
      c.mode = dpc::Mode::random_corruption;
      c.seed = seed;
      const auto m = emit("random_corruption-seed" + std::to_string(seed), run_mode(c));
      auto row = dpc::to_json(m);
      row["seed"] = seed;
      seeds.push_back(row);
      total += m.accuracy();
      triggered = m.triggered;
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, config.eval.random_seeds.size()));
    modes.push_back({{"mode", "random_corruption"},
                     {"instances", evals.size()},
                     {"accuracy", total / n},
                     {"triggered", triggered},
                     {"seeds", seeds}});
  }

  std::vector<flow::FlowReport> reports;
  std::size_t analysis_errors = 0;
  for (const auto& f : firsts) {
    if (f.report) reports.push_back(*f.report);
    else ++analysis_errors;
  }
  const auto grid = threshold_grid();
  const auto counts = dpc::trigger_counts(reports, cfg, grid);

  auto out = artifact_header(config, "eval");
  out["instances"] = evals.size();
  out["analysis_errors"] = analysis_errors;
  out["ratio_threshold"] = cfg.ratio_threshold;
  out["calibration"] = calibration;
  out["modes"] = modes;
  out["threshold_sweep"] = {{"thresholds", grid}, {"trigger_counts", counts}};
  if (fs::exists(paths.base_summary))
    out["base_model_accuracy"] = json::parse(read_text(paths.base_summary)).at("eval_accuracy");
  if (fs::exists(paths.prompt))
    out["tune_accuracy"] = tuning::load_prompt(paths.prompt).metadata.value("eval_accuracy", json());
  write_text_atomically(paths.eval_report, out.dump(1) + "\n");
  log << "eval: report -> " << paths.eval_report.string() << "\n";
  return 0;
}

int export_heatmap(const RunConfig& config, const std::optional<fs::path>& dump, const std::optional<fs::path>& output,
                   std::ostream& log) {
  std::vector<fs::path> dumps;
  if (dump) {
    require(*dump);
    dumps.push_back(*dump);
  } else {
    const auto dir = artifact_paths(config).analysis_dir;
    require(dir);
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.path().string().ends_with(".saliency.json")) dumps.push_back(entry.path());
    std::sort(dumps.begin(), dumps.end());
    if (dumps.empty()) throw MissingArtifact(dir / "*.saliency.json");
  }
  if (output && dumps.size() != 1) throw std::invalid_argument("export-heatmap: --output needs exactly one dump");
  for (const auto& path : dumps) {
    const auto stack = flow::stack_from_dump(json::parse(read_text(path)));
    fs::path target = output ? *output : path;
    if (!output) {
      auto name = path.filename().string();
      name = name.substr(0, name.size() - std::string(".saliency.json").size()) + ".heatmap.csv";
      target = path.parent_path() / name;
    }
    write_text_atomically(target, flow::heatmap_csv(stack));
    log << "export-heatmap: " << target.string() << "\n";
  }
  return 0;
}

}  // namespace pflow::cli
