#include "oracles.hpp"

#include "pflow/flow_analysis.hpp"
#include "pflow/task_gen.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <random>
#include <sstream>

using namespace pflow;
using flow::SaliencyStack;
using flow::SegmentedSequence;
using flow::Span;
using tensor::Tensor;

namespace {

SegmentedSequence segments(std::size_t l, std::size_t q, std::size_t r) {
  return SegmentedSequence::build(std::vector<lm::TokenId>(q, 3), std::vector<lm::TokenId>(r, 4), l);
}

SaliencyStack uniform_stack(std::size_t n, std::size_t layers, double c) {
  SaliencyStack s;
  for (std::size_t k = 0; k < layers; ++k) s.layers.push_back(Tensor::filled({n, n}, c));
  return s;
}

lm::AttentionCapture capture_1x1(std::vector<double> probs, std::vector<double> grads) {
  lm::AttentionCapture cap;
  cap.n_layers = 1;
  cap.n_heads = probs.size();
  for (std::size_t h = 0; h < probs.size(); ++h) {
    cap.probs.push_back(Tensor::matrix(1, 1, {probs[h]}));
    cap.grads.push_back(Tensor::matrix(1, 1, {grads[h]}));
  }
  return cap;
}

}  // namespace

TEST_CASE("segment boundaries and midpoint") {
  const auto s = segments(4, 3, 7);
  CHECK(s.prompt == Span{0, 3});
  CHECK(s.question == Span{4, 6});
  CHECK(s.rationale == Span{7, 13});
  CHECK(s.r_mid == 10);  // floor((7 + 13) / 2)
  CHECK(s.rationale_targets().front() == 3);
  CHECK_THROWS_AS(SegmentedSequence::build(std::vector<lm::TokenId>{3}, {}, 4), flow::MissingRationale);
}

TEST_CASE("saliency is |sum over heads of A * dL/dA|") {
  SUBCASE("single head 0.4 * -0.5") {
    const auto s = flow::saliency_from_capture(capture_1x1({0.4}, {-0.5}));
    CHECK(s.layer(0)(0, 0) == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("heads sum before the absolute value") {
    const auto s = flow::saliency_from_capture(capture_1x1({0.6, 0.5}, {0.5, -1.0}));
    CHECK(s.layer(0)(0, 0) == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("zero gradients give all-zero matrices") {
    const auto s = flow::saliency_from_capture(capture_1x1({0.7, 0.3}, {0.0, 0.0}));
    CHECK(s.layer(0)(0, 0) == 0.0);
  }
  SUBCASE("stored as (source, target): the transpose of the attention layout") {
    lm::AttentionCapture cap;
    cap.n_layers = 1;
    cap.n_heads = 1;
    cap.probs.push_back(Tensor::matrix(2, 2, {1.0, 0.0, 0.25, 0.75}));
    cap.grads.push_back(Tensor::matrix(2, 2, {1.0, 0.0, 2.0, 1.0}));
    const auto s = flow::saliency_from_capture(cap);
    CHECK(s.layer(0)(0, 1) == 0.5);  // query 1 reads key 0
    CHECK(s.layer(0)(1, 0) == 0.0);
  }
}

TEST_CASE("saliency of a real model: nonnegative, causal and detached-safe") {
  lm::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = tasks::Vocabulary::standard().size();
  c.max_seq = 64;
  const lm::TinyLm model(lm::ModelWeights::initialize(c, 4));
  std::vector<double> v(3 * 16, 0.1);
  const SoftPrompt prompt(Tensor::matrix(3, 16, v));
  const auto seq = SegmentedSequence::build(std::vector<lm::TokenId>{1, 15, 6, 22}, std::vector<lm::TokenId>{6, 12, 2}, 3);
  const auto st = flow::compute_saliency(model, seq, prompt);
  REQUIRE(st.n_layers() == 2);
  for (const auto& m : st.layers) {
    REQUIRE(m.rows() == seq.total_len());
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) {
        CHECK(m(i, j) >= 0.0);
        if (i > j) CHECK(m(i, j) == 0.0);
      }
  }
  // Hand-built graph whose loss never touches the tracked attention node.
  tensor::Graph g;
  const auto a = g.track(g.constant(Tensor::matrix(1, 2, {0.3, 0.7})));
  const auto x = g.variable(Tensor::matrix(1, 1, {2.0}));
  const auto grads = g.backward(g.sum(g.mul(x, x)));
  (void)a;
  CHECK_FALSE(grads.contains(a));
}

TEST_CASE("region_flow") {
  CHECK(flow::region_flow(uniform_stack(8, 1, 1.0), 0, {1, 3}, {2, 5}) == 1.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> v(64);
  for (auto& x : v) x = u(rng);
  SaliencyStack s;
  s.layers.push_back(Tensor::matrix(8, 8, v));
  CHECK(flow::region_flow(s, 0, {0, 1}, {4, 6}) == doctest::Approx(oracle::mean_block(s.layers[0], 0, 1, 4, 6)).epsilon(1e-14));
  // Region entirely below the diagonal of a causal stack.
  std::mt19937_64 rng2(3);
  const auto f = oracle::random_fixture(rng2);
  const auto n = f.seq.total_len();
  CHECK(flow::region_flow(f.stack, 0, {n - 1, n - 1}, {0, n - 2}) == 0.0);
  CHECK_THROWS(flow::region_flow(s, 0, {3, 2}, {0, 1}));
  CHECK_THROWS(flow::region_flow(s, 0, {0, 8}, {0, 1}));
  CHECK_THROWS(flow::region_flow(s, 1, {0, 1}, {0, 1}));
}

TEST_CASE("accumulation scores") {
  const auto seq = segments(4, 5, 6);
  SUBCASE("uniform value c over 3 layers scores 3*m*c") {
    const double c = 0.125;
    const std::vector<std::size_t> layers = {0, 1, 2};
    const auto acc = flow::accumulation_scores(uniform_stack(seq.total_len(), 3, c), layers, seq);
    for (double x : acc.total) CHECK(x == doctest::Approx(3 * 11 * c).epsilon(1e-14));
  }
  SUBCASE("a dominant prompt row scores its sum over q and r") {
    auto st = uniform_stack(seq.total_len(), 1, 0.0);
    std::vector<double> vals(seq.total_len() * seq.total_len(), 0.0);
    double row_sum = 0.0;
    for (std::size_t j = 0; j < seq.total_len(); ++j) {
      vals[2 * seq.total_len() + j] = 1.0 + static_cast<double>(j);
      if (j >= seq.question.first) row_sum += 1.0 + static_cast<double>(j);
    }
    st.layers[0] = Tensor::matrix(seq.total_len(), seq.total_len(), vals);
    const std::vector<std::size_t> layers = {0};
    const auto acc = flow::accumulation_scores(st, layers, seq);
    CHECK(acc.total[2] == row_sum);
    CHECK(acc.total[0] == 0.0);
    // The transposed reading looks at columns instead.
    const auto t = flow::accumulation_scores(st, layers, seq, flow::Orientation::prompt_as_target);
    const auto ref = oracle::accumulation_per_layer(st, seq, layers, true);
    for (std::size_t i = 0; i < 4; ++i) CHECK(t.total[i] == ref[0][i]);
  }
  SUBCASE("prompt of length 1 takes all prompt-to-(q,r) mass") {
    const auto one = segments(1, 3, 4);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> v(64);
    for (auto& x : v) x = u(rng);
    SaliencyStack st;
    st.layers.push_back(Tensor::matrix(8, 8, v));
    const std::vector<std::size_t> layers = {0};
    double mass = 0.0;
    for (std::size_t j = 1; j < 8; ++j) mass += v[j];
    CHECK(flow::accumulation_scores(st, layers, one).total[0] == doctest::Approx(mass).epsilon(1e-14));
  }
  SUBCASE("layer set errors") {
    const auto st = uniform_stack(seq.total_len(), 2, 1.0);
    CHECK_THROWS(flow::accumulation_scores(st, std::vector<std::size_t>{}, seq));
    CHECK_THROWS(flow::accumulation_scores(st, std::vector<std::size_t>{2}, seq));
  }
}

TEST_CASE("default shallow layers") {
  CHECK(flow::default_shallow_layers(1) == std::vector<std::size_t>{0});
  CHECK(flow::default_shallow_layers(4) == std::vector<std::size_t>{1, 2, 3});
  CHECK(flow::default_shallow_layers(32) == std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("detect_accumulation") {
  const std::vector<double> uniform(8, 2.5);
  CHECK(flow::detect_accumulation(uniform, 10.0).flagged.empty());

  std::vector<double> spike(20, 0.0);
  spike[7] = 100.0;
  const auto a = flow::detect_accumulation(spike, 10.0);
  CHECK(a.flagged == std::vector<std::size_t>{7});
  CHECK(a.key_token == 7);

  std::vector<double> scaled = spike;
  for (auto& x : scaled) x *= 7.0;
  const auto b = flow::detect_accumulation(scaled, 10.0);
  CHECK(b.flagged == a.flagged);
  CHECK(b.key_token == a.key_token);

  const std::vector<double> zeros(5, 0.0);
  const auto z = flow::detect_accumulation(zeros, 10.0, 3);
  CHECK(z.flagged.empty());
  CHECK(z.key_token == 3);

  // Exactly at the threshold does not flag: 10 tokens, one at 10, rest 0 -> mean 1.
  std::vector<double> edge(10, 0.0);
  edge[4] = 10.0;
  CHECK(flow::detect_accumulation(edge, 10.0).flagged.empty());
  CHECK(flow::detect_accumulation(edge, 10.0).key_token == 4);

  const std::vector<double> tie = {1.0, 3.0, 3.0};
  CHECK(flow::detect_accumulation(tie, 10.0).key_token == 1);
}

TEST_CASE("pattern change score") {
  const auto seq = segments(3, 2, 6);
  CHECK(flow::pattern_change_score(uniform_stack(seq.total_len(), 2, 0.75), seq) == 0.75);
  std::mt19937_64 rng(8);
  for (int k = 0; k < 10; ++k) {
    const auto f = oracle::random_fixture(rng);
    CHECK(flow::pattern_change_score(f.stack, f.seq) == doctest::Approx(oracle::s_ifp(f.stack, f.seq)).epsilon(1e-14));
  }
  auto st = uniform_stack(seq.total_len(), 1, 1.0);
  std::vector<double> v(st.layers[0].values().begin(), st.layers[0].values().end());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = seq.r_mid; j <= seq.rationale.last; ++j) v[i * seq.total_len() + j] = 0.0;
  st.layers[0] = Tensor::matrix(seq.total_len(), seq.total_len(), v);
  CHECK(flow::pattern_change_score(st, seq) == 0.0);
}

TEST_CASE("affected ratio") {
  // 19 rationale tokens: 9 former, 10 latter.
  const auto seq = segments(2, 2, 19);
  REQUIRE(seq.r_mid - seq.rationale.first == 9);
  const std::size_t n = seq.total_len();
  const auto with_columns = [&](auto value_of) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t t = seq.rationale.first; t <= seq.rationale.last; ++t)
      for (std::size_t p = 0; p < 2; ++p) v[p * n + t] = value_of(t);
    SaliencyStack s;
    s.layers.push_back(Tensor::matrix(n, n, v));
    return s;
  };
  const auto latter = [&](std::size_t t) { return t >= seq.r_mid; };
  CHECK(flow::affected_ratio(with_columns([&](std::size_t t) { return latter(t) ? 2.0 : 1.0; }), seq).ratio == 1.0);
  CHECK(flow::affected_ratio(with_columns([&](std::size_t t) { return latter(t) ? 0.5 : 1.0; }), seq).ratio == 0.0);
  CHECK(flow::affected_ratio(with_columns([&](std::size_t) { return 1.0; }), seq).ratio == 0.0);  // strict
  const auto three = flow::affected_ratio(
      with_columns([&](std::size_t t) { return latter(t) && t < seq.r_mid + 3 ? 5.0 : 1.0; }), seq);
  CHECK(three.ratio == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(three.beta == 1.0);

  const auto short_seq = segments(2, 2, 2);  // r_mid == r_s: no former span
  CHECK_THROWS(flow::affected_ratio(uniform_stack(short_seq.total_len(), 1, 1.0), short_seq));
}

TEST_CASE("adding mass to one prompt token keeps it in I_acc") {
  std::mt19937_64 rng(12);
  std::size_t checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto f = oracle::random_fixture(rng, 1.0);
    const flow::FlowConfig cfg;
    const auto before = flow::analyze(f.stack, f.seq, cfg);
    if (before.i_acc.flagged.empty()) continue;
    const std::size_t tok = before.i_acc.flagged.front();
    const double extra = std::uniform_real_distribution<double>(0.0, 50.0)(rng);
    for (auto& layer : f.stack.layers) {
      std::vector<double> v(layer.values().begin(), layer.values().end());
      const std::size_t n = layer.rows();
      for (std::size_t j = f.seq.question.first; j < n; ++j) v[tok * n + j] += extra;
      layer = Tensor::matrix(n, n, v);
    }
    const auto after = flow::analyze(f.stack, f.seq, cfg);
    CHECK(std::find(after.i_acc.flagged.begin(), after.i_acc.flagged.end(), tok) != after.i_acc.flagged.end());
    ++checked;
  }
  CHECK(checked > 10);
}

TEST_CASE("report fields, dump round trip and heatmap") {
  std::mt19937_64 rng(21);
  const auto f = oracle::random_fixture(rng);
  const auto r = flow::analyze(f.stack, f.seq);
  CHECK(r.s_pq.size() == f.stack.n_layers());
  CHECK(r.ratio_r() >= 0.0);
  CHECK(r.ratio_r() <= 1.0);
  CHECK(f.seq.prompt.contains(r.key_token()));
  for (auto t : r.i_acc.flagged) CHECK(f.seq.prompt.contains(t));

  const auto back = flow::stack_from_dump(flow::saliency_dump(f.stack, f.seq));
  REQUIRE(back.n_layers() == f.stack.n_layers());
  for (std::size_t l = 0; l < back.n_layers(); ++l) CHECK(back.layers[l] == f.stack.layers[l]);
  CHECK(back.instance_id == f.stack.instance_id);

  const auto csv = flow::heatmap_csv(f.stack);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "layer,i,j,value");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  const auto n = f.seq.total_len();
  CHECK(rows == f.stack.n_layers() * n * n);
  const auto j = flow::to_json(r);
  CHECK(j.contains("ratio_r"));
  CHECK(j.contains("key_token"));
}
