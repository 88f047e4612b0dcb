#include "pflow/flow_analysis.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace pflow::flow {

using tensor::Tensor;

namespace {

void require_span(const char* what, Span s, std::size_t bound) {
  if (s.first > s.last) throw std::invalid_argument(std::string(what) + ": empty span");
  if (s.last >= bound)
    throw std::out_of_range(std::string(what) + ": span [" + std::to_string(s.first) + ", " + std::to_string(s.last) +
                            "] outside matrix of size " + std::to_string(bound));
}

const Tensor& last_layer(const SaliencyStack& stack) {
  if (stack.layers.empty()) throw std::invalid_argument("saliency stack has no layers");
  return stack.layers.back();
}

}  // namespace

// ---------------------------------------------------------------------------
// SegmentedSequence

SegmentedSequence SegmentedSequence::build(std::span<const TokenId> question, std::span<const TokenId> rationale,
                                           std::size_t prompt_len, double split) {
  if (rationale.empty())
    throw MissingRationale("a complete rationale is required for flow analysis; the instance has none");
  if (question.empty()) throw std::invalid_argument("SegmentedSequence: empty question");
  if (prompt_len == 0) throw std::invalid_argument("SegmentedSequence: flow analysis needs a soft prompt");
  if (!(split >= 0.0 && split <= 1.0)) throw std::invalid_argument("SegmentedSequence: split outside [0, 1]");
  SegmentedSequence s;
  s.tokens.assign(question.begin(), question.end());
  s.tokens.insert(s.tokens.end(), rationale.begin(), rationale.end());
  s.prompt_len = prompt_len;
  s.prompt = {0, prompt_len - 1};
  s.question = {prompt_len, prompt_len + question.size() - 1};
  s.rationale = {s.question.last + 1, prompt_len + s.tokens.size() - 1};
  s.r_mid = s.rationale.first +
            static_cast<std::size_t>(std::floor(split * static_cast<double>(s.rationale.last - s.rationale.first)));
  s.validate();
  return s;
}

std::vector<std::size_t> SegmentedSequence::rationale_targets() const {
  std::vector<std::size_t> out;
  for (std::size_t p = rationale.first; p <= rationale.last; ++p) out.push_back(p - prompt_len);
  return out;
}

void SegmentedSequence::validate() const {
  const bool ordered = prompt.first <= prompt.last && prompt.last < question.first && question.first <= question.last &&
                       question.last < rationale.first && rationale.first <= r_mid && r_mid <= rationale.last;
  if (!ordered) throw std::invalid_argument("SegmentedSequence: segment boundaries out of order");
  if (rationale.last + 1 != total_len() || prompt.first != 0 || prompt.count() != prompt_len)
    throw std::invalid_argument("SegmentedSequence: segments do not tile the sequence");
}

// ---------------------------------------------------------------------------
// Saliency

SaliencyStack SaliencyStack::scaled(double factor) const {
  SaliencyStack out = *this;
  for (auto& m : out.layers)
    for (double& v : m.mutable_values()) v *= factor;
  return out;
}

SaliencyStack saliency_from_capture(const lm::AttentionCapture& capture) {
  if (!capture.has_grads()) throw std::invalid_argument("saliency: attention capture carries no gradients");
  SaliencyStack stack;
  for (std::size_t l = 0; l < capture.n_layers; ++l) {
    const std::size_t n = capture.prob(l, 0).rows();
    std::vector<double> acc(n * n, 0.0);  // indexed [target][source], i.e. attention layout
    for (std::size_t h = 0; h < capture.n_heads; ++h) {
      const auto a = capture.prob(l, h).values();
      const auto g = capture.grad(l, h).values();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += a[k] * g[k];
    }
    Tensor s = Tensor::zeros({n, n});
    auto out = s.mutable_values();
    for (std::size_t target = 0; target < n; ++target)
      for (std::size_t source = 0; source < n; ++source)
        out[source * n + target] = std::abs(acc[target * n + source]);
    stack.layers.push_back(std::move(s));
  }
  return stack;
}

SaliencyStack compute_saliency(const lm::TinyLm& model, const SegmentedSequence& sequence, const SoftPrompt& prompt,
                               std::string loss_definition) {
  sequence.validate();
  if (prompt.length() != sequence.prompt_len)
    throw std::invalid_argument("compute_saliency: prompt length does not match the segmented sequence");
  lm::ForwardOptions opts;
  opts.track_attention = true;
  auto pass = model.forward(sequence.tokens, &prompt, opts);
  const auto targets = sequence.rationale_targets();
  const auto loss = lm::sequence_loss(pass.graph, pass.logits, sequence.tokens, targets, sequence.prompt_len);
  const auto grads = pass.graph.backward(loss);
  auto stack = saliency_from_capture(lm::capture_attention(pass, &grads));
  stack.loss_definition = std::move(loss_definition);
  return stack;
}

// ---------------------------------------------------------------------------
// Region metrics

double region_flow(const SaliencyStack& stack, std::size_t layer, Span source, Span target) {
  const auto& m = stack.layer(layer);
  require_span("region_flow source", source, m.rows());
  require_span("region_flow target", target, m.cols());
  double total = 0.0;
  for (std::size_t i = source.first; i <= source.last; ++i)
    for (std::size_t j = target.first; j <= target.last; ++j) total += m(i, j);
  return total / static_cast<double>(source.count() * target.count());
}

std::vector<std::size_t> default_shallow_layers(std::size_t n_layers) {
  if (n_layers == 0) return {};
  if (n_layers == 1) return {0};
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l <= std::min<std::size_t>(9, n_layers - 1); ++l) out.push_back(l);
  return out;
}

AccumulationScores accumulation_scores(const SaliencyStack& stack, std::span<const std::size_t> shallow_layers,
                                       const SegmentedSequence& sequence, Orientation orientation) {
  if (shallow_layers.empty()) throw std::invalid_argument("accumulation_scores: empty shallow layer set");
  AccumulationScores out;
  out.total.assign(sequence.prompt.count(), 0.0);
  for (auto l : shallow_layers) {
    if (l >= stack.n_layers())
      throw std::out_of_range("accumulation_scores: layer " + std::to_string(l) + " outside stack of " +
                              std::to_string(stack.n_layers()) + " layers");
    const auto& m = stack.layer(l);
    if (m.rows() != sequence.total_len()) throw std::invalid_argument("accumulation_scores: stack/sequence size mismatch");
    std::vector<double> scores(sequence.prompt.count(), 0.0);
    for (std::size_t i = sequence.prompt.first; i <= sequence.prompt.last; ++i) {
      double s = 0.0;
      for (std::size_t j = sequence.question.first; j <= sequence.rationale.last; ++j)
        s += orientation == Orientation::prompt_as_source ? m(i, j) : m(j, i);
      scores[i - sequence.prompt.first] = s;
      out.total[i - sequence.prompt.first] += s;
    }
    out.layers.push_back(l);
    out.per_layer.push_back(std::move(scores));
  }
  return out;
}

Accumulation detect_accumulation(std::span<const double> scores, double alpha, std::size_t prompt_start) {
  if (scores.empty()) throw std::invalid_argument("detect_accumulation: no scores");
  if (!(alpha > 0.0)) throw std::invalid_argument("detect_accumulation: alpha must be > 0");
  double total = 0.0;
  for (double s : scores) total += s;
  const double threshold = alpha * (total / static_cast<double>(scores.size()));
  Accumulation out;
  std::size_t best = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > threshold) out.flagged.push_back(prompt_start + i);
    if (scores[i] > scores[best]) best = i;
  }
  out.key_token = prompt_start + best;
  return out;
}

double pattern_change_score(const SaliencyStack& stack, const SegmentedSequence& sequence) {
  if (sequence.r_mid > sequence.rationale.last) throw std::invalid_argument("pattern_change_score: r_h > r_e");
  const Span latter{sequence.r_mid, sequence.rationale.last};
  return region_flow(stack, stack.n_layers() - 1, sequence.prompt, latter);
}

AffectedRatio affected_ratio(const SaliencyStack& stack, const SegmentedSequence& sequence) {
  const auto& m = last_layer(stack);
  if (sequence.r_mid <= sequence.rationale.first)
    throw std::invalid_argument("affected_ratio: former rationale span is empty, beta is undefined");
  if (sequence.r_mid > sequence.rationale.last) throw std::invalid_argument("affected_ratio: latter span is empty");
  if (m.rows() != sequence.total_len()) throw std::invalid_argument("affected_ratio: stack/sequence size mismatch");

  AffectedRatio out;
  const auto p = sequence.prompt;
  for (std::size_t t = sequence.rationale.first; t <= sequence.rationale.last; ++t) {
    double s = 0.0;
    for (std::size_t i = p.first; i <= p.last; ++i) s += m(i, t);
    out.s_pr_token.push_back(s / static_cast<double>(p.count()));
  }
  const std::size_t former = sequence.r_mid - sequence.rationale.first;
  double beta = 0.0;
  for (std::size_t k = 0; k < former; ++k) beta += out.s_pr_token[k];
  out.beta = beta / static_cast<double>(former);
  std::size_t affected = 0;
  for (std::size_t k = former; k < out.s_pr_token.size(); ++k)
    if (out.s_pr_token[k] > out.beta) ++affected;
  out.ratio = static_cast<double>(affected) / static_cast<double>(out.s_pr_token.size() - former);
  return out;
}

FlowReport analyze(const SaliencyStack& stack, const SegmentedSequence& sequence, const FlowConfig& config) {
  sequence.validate();
  if (stack.size() != sequence.total_len()) throw std::invalid_argument("analyze: stack/sequence size mismatch");
  FlowReport r;
  for (std::size_t l = 0; l < stack.n_layers(); ++l) {
    r.s_pq.push_back(region_flow(stack, l, sequence.prompt, sequence.question));
    r.s_pr.push_back(region_flow(stack, l, sequence.prompt, sequence.rationale));
  }
  const auto layers = config.shallow_layers.empty() ? default_shallow_layers(stack.n_layers()) : config.shallow_layers;
  r.accumulation = accumulation_scores(stack, layers, sequence, config.orientation);
  r.i_acc = detect_accumulation(r.accumulation.total, config.alpha, sequence.prompt.first);
  r.s_ifp = pattern_change_score(stack, sequence);
  r.affected = affected_ratio(stack, sequence);
  return r;
}

// ---------------------------------------------------------------------------
// Serialisation

nlohmann::json to_json(const SegmentedSequence& s) {
  return {{"prompt", {s.prompt.first, s.prompt.last}},
          {"question", {s.question.first, s.question.last}},
          {"rationale", {s.rationale.first, s.rationale.last}},
          {"r_mid", s.r_mid},
          {"tokens", s.tokens}};
}

nlohmann::json to_json(const FlowReport& r) {
  return {{"s_pq", r.s_pq},
          {"s_pr", r.s_pr},
          {"accumulation",
           {{"layers", r.accumulation.layers}, {"per_layer", r.accumulation.per_layer}, {"total", r.accumulation.total}}},
          {"i_acc", r.i_acc.flagged},
          {"key_token", r.i_acc.key_token},
          {"s_ifp", r.s_ifp},
          {"s_pr_token", r.affected.s_pr_token},
          {"beta", r.affected.beta},
          {"ratio_r", r.affected.ratio}};
}

nlohmann::json saliency_dump(const SaliencyStack& stack, const SegmentedSequence& sequence) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& m : stack.layers) {
    std::vector<double> v(m.values().begin(), m.values().end());
    layers.push_back(std::move(v));
  }
  return {{"format_version", 1},
          {"instance_id", stack.instance_id},
          {"loss_definition", stack.loss_definition},
          {"orientation", "source,target"},
          {"n_layers", stack.n_layers()},
          {"seq_len", stack.size()},
          {"segments", to_json(sequence)},
          {"layers", std::move(layers)}};
}

SaliencyStack stack_from_dump(const nlohmann::json& dump) {
  SaliencyStack stack;
  stack.instance_id = dump.value("instance_id", std::string{});
  stack.loss_definition = dump.value("loss_definition", std::string{});
  const auto n = dump.at("seq_len").get<std::size_t>();
  for (const auto& layer : dump.at("layers")) stack.layers.push_back(Tensor::matrix(n, n, layer.get<std::vector<double>>()));
  if (stack.layers.size() != dump.at("n_layers").get<std::size_t>())
    throw std::runtime_error("saliency dump: layer count mismatch");
  return stack;
}

std::string heatmap_csv(const SaliencyStack& stack) {
  std::string out = "layer,i,j,value\n";
  char buf[96];
  for (std::size_t l = 0; l < stack.n_layers(); ++l) {
    const auto& m = stack.layer(l);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) {
        std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%.17g\n", l, i, j, m(i, j));
        out += buf;
      }
  }
  return out;
}

}  // namespace pflow::flow
