#include "pflow/dpc.hpp"

#include "pflow/artifacts.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace pflow::dpc {

using tensor::Tensor;

NLOHMANN_JSON_SERIALIZE_ENUM(Mode, {{Mode::off, "off"},
                                    {Mode::dpc, "dpc"},
                                    {Mode::all_corruption, "all_corruption"},
                                    {Mode::random_corruption, "random_corruption"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SparsifyRule, {{SparsifyRule::global_magnitude, "global_magnitude"},
                                            {SparsifyRule::per_row_magnitude, "per_row_magnitude"},
                                            {SparsifyRule::global_signed, "global_signed"}})

}  // namespace pflow::dpc

namespace pflow::flow {
NLOHMANN_JSON_SERIALIZE_ENUM(Orientation, {{Orientation::prompt_as_source, "prompt_as_source"},
                                           {Orientation::prompt_as_target, "prompt_as_target"}})
}  // namespace pflow::flow

namespace pflow::dpc {

std::string mode_name(Mode mode) { return nlohmann::json(mode).get<std::string>(); }

Mode parse_mode(const std::string& name) {
  for (auto m : {Mode::off, Mode::dpc, Mode::all_corruption, Mode::random_corruption})
    if (mode_name(m) == name) return m;
  throw std::invalid_argument("unknown DPC mode '" + name + "'");
}

void DpcConfig::validate() const {
  if (!(gamma_percent >= 0.0 && gamma_percent <= 100.0)) throw std::invalid_argument("DpcConfig: gamma_percent outside [0, 100]");
  if (!(ratio_threshold >= 0.0 && ratio_threshold <= 1.0))
    throw std::invalid_argument("DpcConfig: ratio_threshold outside [0, 1]");
  if (!(alpha > 0.0)) throw std::invalid_argument("DpcConfig: alpha must be > 0");
  if (!(rationale_split >= 0.0 && rationale_split <= 1.0))
    throw std::invalid_argument("DpcConfig: rationale_split outside [0, 1]");
}

flow::FlowConfig DpcConfig::flow_config() const { return {alpha, shallow_layers, orientation}; }

void to_json(nlohmann::json& j, const DpcConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"gamma_percent", c.gamma_percent},
                     {"ratio_threshold", c.ratio_threshold},
                     {"shallow_layers", c.shallow_layers},
                     {"mode", c.mode},
                     {"seed", c.seed},
                     {"mask_factor", c.mask_factor},
                     {"sparsify", c.sparsify},
                     {"use_ifp_trigger", c.use_ifp_trigger},
                     {"ifp_threshold", c.ifp_threshold},
                     {"orientation", c.orientation},
                     {"rationale_split", c.rationale_split},
                     {"max_new", c.max_new}};
}

void from_json(const nlohmann::json& j, DpcConfig& c) {
  c.alpha = j.value("alpha", c.alpha);
  c.gamma_percent = j.value("gamma_percent", c.gamma_percent);
  c.ratio_threshold = j.value("ratio_threshold", c.ratio_threshold);
  c.shallow_layers = j.value("shallow_layers", c.shallow_layers);
  c.mode = j.value("mode", c.mode);
  c.seed = j.value("seed", c.seed);
  c.mask_factor = j.value("mask_factor", c.mask_factor);
  c.sparsify = j.value("sparsify", c.sparsify);
  c.use_ifp_trigger = j.value("use_ifp_trigger", c.use_ifp_trigger);
  c.ifp_threshold = j.value("ifp_threshold", c.ifp_threshold);
  c.orientation = j.value("orientation", c.orientation);
  c.rationale_split = j.value("rationale_split", c.rationale_split);
  c.max_new = j.value("max_new", c.max_new);
}

bool dynamic_trigger(const flow::FlowReport& report, const DpcConfig& config) {
  const bool affected = report.ratio_r() > config.ratio_threshold;
  if (!config.use_ifp_trigger) return affected;
  return affected && report.s_ifp > config.ifp_threshold;
}

// ---------------------------------------------------------------------------
// Corruption

std::size_t sparsified_count(std::size_t prompt_len, std::size_t dim, double gamma_percent) {
  if (prompt_len == 0) return 0;
  const double candidates = static_cast<double>((prompt_len - 1) * dim);
  return static_cast<std::size_t>(std::floor(gamma_percent * candidates / 100.0));
}

CorruptionPlan plan_corruption(const SoftPrompt& prompt, std::size_t key_index, const DpcConfig& config) {
  config.validate();
  const std::size_t l = prompt.length();
  const std::size_t d = prompt.dim();
  if (key_index >= l)
    throw std::out_of_range("corrupt_prompt: key token " + std::to_string(key_index) + " outside prompt of length " +
                            std::to_string(l));
  if (config.gamma_percent > 0.0 && l < 2)
    throw std::invalid_argument("corrupt_prompt: sparsification needs a prompt of at least 2 vectors");

  CorruptionPlan plan;
  plan.key_index = key_index;
  plan.mask_factor = config.mask_factor;
  const auto& v = prompt.vectors();

  struct Candidate {
    double key;
    Entry entry;
  };
  const auto pick_smallest = [&](std::vector<Candidate> cands, std::size_t k) {
    // Ascending by key, ties broken by (row, col).
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.key != b.key) return a.key < b.key;
      return a.entry < b.entry;
    });
    for (std::size_t i = 0; i < std::min(k, cands.size()); ++i) plan.zeroed_entries.push_back(cands[i].entry);
  };

  switch (config.sparsify) {
    case SparsifyRule::global_magnitude:
    case SparsifyRule::global_signed: {
      std::vector<Candidate> cands;
      cands.reserve((l - 1) * d);
      for (std::size_t r = 0; r < l; ++r) {
        if (r == key_index) continue;
        for (std::size_t c = 0; c < d; ++c) {
          const double x = v(r, c);
          cands.push_back({config.sparsify == SparsifyRule::global_magnitude ? std::abs(x) : x, {r, c}});
        }
      }
      pick_smallest(std::move(cands), sparsified_count(l, d, config.gamma_percent));
      break;
    }
    case SparsifyRule::per_row_magnitude: {
      const auto per_row = static_cast<std::size_t>(std::floor(config.gamma_percent * static_cast<double>(d) / 100.0));
      for (std::size_t r = 0; r < l; ++r) {
        if (r == key_index) continue;
        std::vector<Candidate> cands;
        for (std::size_t c = 0; c < d; ++c) cands.push_back({std::abs(v(r, c)), {r, c}});
        pick_smallest(std::move(cands), per_row);
      }
      break;
    }
  }
  std::sort(plan.zeroed_entries.begin(), plan.zeroed_entries.end());
  return plan;
}

SoftPrompt apply_corruption(const SoftPrompt& prompt, const CorruptionPlan& plan) {
  const std::size_t d = prompt.dim();
  if (plan.key_index >= prompt.length()) throw std::out_of_range("apply_corruption: key row outside prompt");
  Tensor out = prompt.vectors();
  auto values = out.mutable_values();
  for (std::size_t c = 0; c < d; ++c) {
    double& x = values[plan.key_index * d + c];
    x = plan.mask_factor == 0.0 ? 0.0 : plan.mask_factor * x;
  }
  for (const auto& e : plan.zeroed_entries) {
    if (e.row >= prompt.length() || e.col >= d) throw std::out_of_range("apply_corruption: entry outside prompt");
    if (e.row == plan.key_index) throw std::invalid_argument("apply_corruption: zeroed entry inside the key row");
    values[e.row * d + e.col] = 0.0;
  }
  out.check_finite("apply_corruption");
  return SoftPrompt(std::move(out));
}

std::pair<SoftPrompt, CorruptionPlan> corrupt_prompt(const SoftPrompt& prompt, std::size_t key_index,
                                                     const DpcConfig& config) {
  auto plan = plan_corruption(prompt, key_index, config);
  auto corrupted = apply_corruption(prompt, plan);
  return {std::move(corrupted), std::move(plan)};
}

std::pair<SoftPrompt, CorruptionPlan> corrupt_prompt(const SoftPrompt& prompt, const flow::FlowReport& report,
                                                     const DpcConfig& config) {
  return corrupt_prompt(prompt, report.key_token(), config);
}

// ---------------------------------------------------------------------------
// Answers

std::optional<std::string> extract_answer(std::span<const TokenId> output, const tasks::Vocabulary& vocab) {
  const auto delim = vocab.answer_delimiter();
  const auto it = std::find(output.rbegin(), output.rend(), delim);
  if (it == output.rend()) return std::nullopt;
  const auto tail = output.subspan(static_cast<std::size_t>(output.rend() - it));
  std::istringstream words(vocab.detokenize(tail));
  std::string word, normalised;
  while (words >> word) normalised += (normalised.empty() ? "" : " ") + word;
  if (normalised.empty()) return std::nullopt;
  return normalised;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::size_t random_key(const DpcConfig& config, const std::string& instance_id, std::size_t prompt_len) {
  Fnv1a h;
  h.update_value(config.seed);
  h.update_string(instance_id);
  std::mt19937_64 rng(h.digest());
  return std::uniform_int_distribution<std::size_t>(0, prompt_len - 1)(rng);
}

}  // namespace

FirstPass first_pass(const lm::TinyLm& model, const SoftPrompt& prompt, const tasks::TaskInstance& instance,
                     const DpcConfig& config, bool analyze) {
  const auto& vocab = tasks::Vocabulary::standard();
  const TokenId stop[] = {vocab.eos()};
  FirstPass out;
  out.generation = model.greedy_generate(instance.question, &prompt, config.max_new, stop);
  if (!analyze) return out;
  try {
    auto seq = flow::SegmentedSequence::build(instance.question, out.generation.tokens, prompt.length(),
                                              config.rationale_split);
    auto stack = flow::compute_saliency(model, seq, prompt, "self");
    stack.instance_id = instance.id;
    out.report = flow::analyze(stack, seq, config.flow_config());
    out.sequence = std::move(seq);
  } catch (const std::exception& e) {
    out.analysis_error = e.what();
  }
  return out;
}

PipelineTrace complete_pipeline(const lm::TinyLm& model, const SoftPrompt& prompt,
                                const tasks::TaskInstance& instance, const FirstPass& first, const DpcConfig& config) {
  const auto& vocab = tasks::Vocabulary::standard();
  PipelineTrace t;
  t.instance_id = instance.id;
  t.mode = config.mode;
  t.gold = instance.answer;
  t.pass1 = first.generation.tokens;
  t.answer_pass1 = extract_answer(t.pass1, vocab);
  t.final_answer = t.answer_pass1;

  if (config.mode != Mode::off) {
    if (!first.report) {
      t.status = TraceStatus::analysis_error;
      t.error = first.analysis_error.empty() ? "first pass was run without analysis" : first.analysis_error;
    } else {
      t.report = first.report;
      switch (config.mode) {
        case Mode::dpc:
        case Mode::random_corruption: t.triggered = dynamic_trigger(*first.report, config); break;
        case Mode::all_corruption: t.triggered = true; break;
        case Mode::off: break;
      }
    }
  }

  if (t.triggered) {
    const std::size_t key = config.mode == Mode::random_corruption
                                ? random_key(config, instance.id, prompt.length())
                                : first.report->key_token() - first.sequence->prompt.first;
    auto [corrupted, plan] = corrupt_prompt(prompt, key, config);
    const TokenId stop[] = {vocab.eos()};
    auto second = model.greedy_generate(instance.question, &corrupted, config.max_new, stop);
    t.plan = std::move(plan);
    t.pass2 = std::move(second.tokens);
    t.answer_pass2 = extract_answer(*t.pass2, vocab);
    t.final_answer = t.answer_pass2;
  }
  t.correct = tasks::score(t.final_answer, t.gold);
  return t;
}

PipelineTrace run_pipeline(const lm::TinyLm& model, const SoftPrompt& prompt, const tasks::TaskInstance& instance,
                           const DpcConfig& config) {
  config.validate();
  const auto first = first_pass(model, prompt, instance, config, config.mode != Mode::off);
  return complete_pipeline(model, prompt, instance, first, config);
}

nlohmann::json to_json(const PipelineTrace& t, const tasks::Vocabulary& vocab) {
  const auto opt = [](const std::optional<std::string>& s) { return s ? nlohmann::json(*s) : nlohmann::json(); };
  nlohmann::json j{{"id", t.instance_id},
                   {"mode", t.mode},
                   {"status", t.status == TraceStatus::ok ? "ok" : "analysis_error"},
                   {"triggered", t.triggered},
                   {"pass1", vocab.detokenize(t.pass1)},
                   {"answer_pass1", opt(t.answer_pass1)},
                   {"final_answer", opt(t.final_answer)},
                   {"gold", t.gold},
                   {"correct", t.correct}};
  if (!t.error.empty()) j["error"] = t.error;
  if (t.report) {
    j["ratio_r"] = t.report->ratio_r();
    j["beta"] = t.report->affected.beta;
    j["s_ifp"] = t.report->s_ifp;
    j["key_token"] = t.report->key_token();
    j["i_acc"] = t.report->i_acc.flagged;
  }
  if (t.plan) {
    j["plan"] = {{"key_index", t.plan->key_index},
                 {"mask_factor", t.plan->mask_factor},
                 {"n_zeroed", t.plan->zeroed_entries.size()}};
  }
  if (t.pass2) {
    j["pass2"] = vocab.detokenize(*t.pass2);
    j["answer_pass2"] = opt(t.answer_pass2);
  }
  return j;
}

ModeMetrics summarize(std::string mode, std::span<const PipelineTrace> traces) {
  ModeMetrics m;
  m.mode = std::move(mode);
  m.instances = traces.size();
  for (const auto& t : traces) {
    m.correct += t.correct ? 1 : 0;
    m.triggered += t.triggered ? 1 : 0;
    m.errors += t.status != TraceStatus::ok ? 1 : 0;
  }
  return m;
}

nlohmann::json to_json(const ModeMetrics& m) {
  return {{"mode", m.mode},         {"instances", m.instances},       {"correct", m.correct},
          {"accuracy", m.accuracy()}, {"triggered", m.triggered}, {"trigger_rate", m.trigger_rate()},
          {"errors", m.errors}};
}

std::vector<std::size_t> trigger_counts(std::span<const flow::FlowReport> reports, const DpcConfig& config,
                                        std::span<const double> thresholds) {
  std::vector<std::size_t> out;
  for (double th : thresholds) {
    DpcConfig c = config;
    c.ratio_threshold = th;
    out.push_back(static_cast<std::size_t>(
        std::count_if(reports.begin(), reports.end(), [&](const auto& r) { return dynamic_trigger(r, c); })));
  }
  return out;
}

double calibrate_threshold(const lm::TinyLm& model, const SoftPrompt& prompt,
                           std::span<const tasks::TaskInstance> instances, std::span<const FirstPass> first,
                           const DpcConfig& config, std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("calibrate_threshold: empty grid");
  if (instances.size() != first.size()) throw std::invalid_argument("calibrate_threshold: size mismatch");
  // Pass-2 outcomes do not depend on the threshold, only on the key token.
  DpcConfig always = config;
  always.mode = Mode::all_corruption;
  std::vector<char> base_ok(instances.size()), corrupted_ok(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto t = complete_pipeline(model, prompt, instances[i], first[i], always);
    base_ok[i] = tasks::score(t.answer_pass1, instances[i].answer);
    corrupted_ok[i] = t.pass2 ? tasks::score(t.answer_pass2, instances[i].answer) : base_ok[i];
  }
  double best_th = grid.front();
  std::size_t best = 0;
  bool have = false;
  for (double th : grid) {
    DpcConfig c = config;
    c.ratio_threshold = th;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const bool fire = first[i].report && dynamic_trigger(*first[i].report, c);
      correct += fire ? corrupted_ok[i] : base_ok[i];
    }
    if (!have || correct > best || (correct == best && th > best_th)) {
      best = correct;
      best_th = th;
      have = true;
    }
  }
  return best_th;
}

}  // namespace pflow::dpc
