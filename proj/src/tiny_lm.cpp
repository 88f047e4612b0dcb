#include "pflow/tiny_lm.hpp"

#include "pflow/artifacts.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace pflow::lm {

using tensor::Graph;
using tensor::NodeId;
using tensor::Shape;
using tensor::Tensor;

namespace {

// Per-layer parameter block: ln1 (2), per head q/k/v/o (4H), attn bias,
// ln2 (2), feed-forward (4).
std::size_t layer_block(const ModelConfig& c) { return 2 + 4 * c.n_heads + 1 + 2 + 4; }
constexpr std::size_t kEmbeddingTensors = 2;
constexpr std::size_t kHeadTensors = 4;

struct LayerIndex {
  std::size_t base;
  std::size_t n_heads;
  std::size_t ln1_g() const { return base; }
  std::size_t ln1_b() const { return base + 1; }
  std::size_t wq(std::size_t h) const { return base + 2 + kHeadTensors * h; }
  std::size_t wk(std::size_t h) const { return wq(h) + 1; }
  std::size_t wv(std::size_t h) const { return wq(h) + 2; }
  std::size_t wo(std::size_t h) const { return wq(h) + 3; }
  std::size_t attn_bias() const { return base + 2 + kHeadTensors * n_heads; }
  std::size_t ln2_g() const { return attn_bias() + 1; }
  std::size_t ln2_b() const { return attn_bias() + 2; }
  std::size_t w1() const { return attn_bias() + 3; }
  std::size_t b1() const { return attn_bias() + 4; }
  std::size_t w2() const { return attn_bias() + 5; }
  std::size_t b2() const { return attn_bias() + 6; }
};

LayerIndex layer_index(const ModelConfig& c, std::size_t layer) {
  return {kEmbeddingTensors + layer * layer_block(c), c.n_heads};
}

std::size_t final_base(const ModelConfig& c) { return kEmbeddingTensors + c.n_layers * layer_block(c); }

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1)
    throw std::invalid_argument("ModelConfig: all sizes must be >= 1");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
                     {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq = j.value("max_seq", c.max_seq);
}

// ---------------------------------------------------------------------------
// ModelWeights

std::vector<std::string> ModelWeights::parameter_names(const ModelConfig& c) {
  std::vector<std::string> names{"tok_emb", "pos_emb"};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto p = "layer" + std::to_string(l) + ".";
    names.push_back(p + "ln1.gamma");
    names.push_back(p + "ln1.beta");
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto hp = p + "head" + std::to_string(h) + ".";
      for (const char* w : {"wq", "wk", "wv", "wo"}) names.push_back(hp + w);
    }
    names.push_back(p + "attn.bias");
    names.push_back(p + "ln2.gamma");
    names.push_back(p + "ln2.beta");
    names.push_back(p + "ff.w1");
    names.push_back(p + "ff.b1");
    names.push_back(p + "ff.w2");
    names.push_back(p + "ff.b2");
  }
  names.emplace_back("final_ln.gamma");
  names.emplace_back("final_ln.beta");
  names.emplace_back("out.w");
  names.emplace_back("out.b");
  return names;
}

std::vector<Shape> ModelWeights::parameter_shapes(const ModelConfig& c) {
  const auto d = c.d_model;
  const auto dh = c.d_head();
  std::vector<Shape> shapes{{c.vocab_size, d}, {c.max_seq, d}};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    shapes.push_back({1, d});
    shapes.push_back({1, d});
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      shapes.push_back({d, dh});
      shapes.push_back({d, dh});
      shapes.push_back({d, dh});
      shapes.push_back({dh, d});
    }
    shapes.push_back({1, d});
    shapes.push_back({1, d});
    shapes.push_back({1, d});
    shapes.push_back({d, c.d_ff});
    shapes.push_back({1, c.d_ff});
    shapes.push_back({c.d_ff, d});
    shapes.push_back({1, d});
  }
  shapes.push_back({1, d});
  shapes.push_back({1, d});
  shapes.push_back({d, c.vocab_size});
  shapes.push_back({1, c.vocab_size});
  return shapes;
}

ModelWeights ModelWeights::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto names = parameter_names(config);
  const auto shapes = parameter_shapes(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  std::vector<Tensor> tensors;
  tensors.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& name = names[i];
    const bool is_gain = name.ends_with("gamma");
    const bool is_bias = name.ends_with("beta") || name.ends_with(".b") || name.ends_with("b1") ||
                         name.ends_with("b2") || name.ends_with("bias");
    if (is_gain) {
      tensors.push_back(Tensor::filled(shapes[i], 1.0));
    } else if (is_bias) {
      tensors.push_back(Tensor::zeros(shapes[i]));
    } else {
      Tensor t = Tensor::zeros(shapes[i]);
      for (double& v : t.mutable_values()) v = normal(rng);
      tensors.push_back(std::move(t));
    }
  }
  return ModelWeights(config, std::move(tensors));
}

ModelWeights ModelWeights::from_tensors(const ModelConfig& config, std::vector<Tensor> tensors) {
  config.validate();
  const auto shapes = parameter_shapes(config);
  if (tensors.size() != shapes.size())
    throw std::invalid_argument("ModelWeights: expected " + std::to_string(shapes.size()) + " tensors, got " +
                                std::to_string(tensors.size()));
  const auto names = parameter_names(config);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (tensors[i].shape() != shapes[i])
      throw tensor::ShapeError("ModelWeights: " + names[i] + " has shape " + tensor::shape_string(tensors[i].shape()) +
                               ", expected " + tensor::shape_string(shapes[i]));
  }
  return ModelWeights(config, std::move(tensors));
}

std::uint64_t ModelWeights::hash() const {
  Fnv1a h;
  h.update_json(nlohmann::json(config_));
  for (const auto& t : tensors_) {
    for (auto dim : t.shape()) h.update_value(static_cast<std::uint64_t>(dim));
    h.update_bytes(t.values().data(), t.values().size() * sizeof(double));
  }
  return h.digest();
}

// ---------------------------------------------------------------------------
// Forward

ForwardPass run_forward(const ModelWeights& weights, std::span<const TokenId> tokens, const SoftPrompt* prompt,
                        const ForwardOptions& options) {
  const auto& cfg = weights.config();
  const std::size_t prompt_len = prompt ? prompt->length() : 0;
  const std::size_t total = prompt_len + tokens.size();
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (total > cfg.max_seq)
    throw SequenceTooLong("forward: prompt length " + std::to_string(prompt_len) + " + " +
                          std::to_string(tokens.size()) + " tokens = " + std::to_string(total) +
                          " exceeds max_seq " + std::to_string(cfg.max_seq));
  if (prompt && prompt->dim() != cfg.d_model)
    throw tensor::ShapeError("forward: prompt width " + std::to_string(prompt->dim()) + " != d_model " +
                             std::to_string(cfg.d_model));

  ForwardPass pass;
  pass.prompt_len = prompt_len;
  pass.token_count = tokens.size();
  pass.n_heads = cfg.n_heads;
  Graph& g = pass.graph;

  pass.weights.reserve(weights.tensors().size());
  for (const auto& t : weights.tensors())
    pass.weights.push_back(options.track_weights ? g.variable(t) : g.constant(t));
  const auto w = [&](std::size_t i) { return pass.weights[i]; };

  NodeId x = g.gather_rows(w(0), tokens);
  if (prompt) {
    pass.prompt = options.track_prompt ? g.variable(prompt->vectors()) : g.constant(prompt->vectors());
    x = g.concat_rows(*pass.prompt, x);
  }
  x = g.add(x, g.slice_rows(w(1), 0, total));

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head()));
  pass.attention.reserve(cfg.n_layers * cfg.n_heads);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto idx = layer_index(cfg, l);
    const NodeId h = g.layer_norm(x, w(idx.ln1_g()), w(idx.ln1_b()));
    std::optional<NodeId> mixed;
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      const NodeId q = g.matmul(h, w(idx.wq(head)));
      const NodeId k = g.matmul(h, w(idx.wk(head)));
      const NodeId v = g.matmul(h, w(idx.wv(head)));
      NodeId probs = g.causal_softmax(g.scale(g.matmul_nt(q, k), inv_sqrt_dh));
      if (options.track_attention) g.track(probs);
      pass.attention.push_back(probs);
      if (options.attention_edit) {
        Tensor edited = g.value(probs);
        options.attention_edit(l, head, edited);
        probs = g.constant(std::move(edited));
      }
      const NodeId out = g.matmul(g.matmul(probs, v), w(idx.wo(head)));
      mixed = mixed ? g.add(*mixed, out) : out;
    }
    x = g.add(x, g.add_row(*mixed, w(idx.attn_bias())));
    const NodeId h2 = g.layer_norm(x, w(idx.ln2_g()), w(idx.ln2_b()));
    const NodeId ff = g.gelu(g.add_row(g.matmul(h2, w(idx.w1())), w(idx.b1())));
    x = g.add(x, g.add_row(g.matmul(ff, w(idx.w2())), w(idx.b2())));
  }

  if (options.last_row_only) x = g.slice_rows(x, total - 1, 1);
  const auto fb = final_base(cfg);
  x = g.layer_norm(x, w(fb), w(fb + 1));
  pass.logits = g.add_row(g.matmul(x, w(fb + 2)), w(fb + 3));
  return pass;
}

AttentionCapture capture_attention(const ForwardPass& pass, const tensor::Gradients* grads) {
  AttentionCapture cap;
  cap.n_heads = pass.n_heads;
  cap.n_layers = pass.n_heads ? pass.attention.size() / pass.n_heads : 0;
  cap.probs.reserve(pass.attention.size());
  for (auto id : pass.attention) cap.probs.push_back(pass.graph.value(id));
  if (grads) {
    cap.grads.reserve(pass.attention.size());
    for (auto id : pass.attention) {
      if (!grads->contains(id))
        throw std::logic_error("capture_attention: attention probabilities were not tracked");
      cap.grads.push_back(grads->at(id));
    }
  }
  return cap;
}

NodeId sequence_loss(Graph& graph, NodeId logits, std::span<const TokenId> tokens, std::span<const std::size_t> scored,
                     std::size_t prompt_len) {
  if (scored.empty()) throw std::invalid_argument("sequence_loss: empty set of scored positions");
  const auto& lv = graph.value(logits);
  if (lv.rows() != prompt_len + tokens.size())
    throw tensor::ShapeError("sequence_loss: logits cover " + std::to_string(lv.rows()) + " positions, expected " +
                             std::to_string(prompt_len + tokens.size()));
  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  rows.reserve(scored.size());
  targets.reserve(scored.size());
  for (auto k : scored) {
    if (k == 0 || k >= tokens.size())
      throw std::out_of_range("sequence_loss: scored position " + std::to_string(k) + " outside [1, " +
                              std::to_string(tokens.size()) + ")");
    rows.push_back(prompt_len + k - 1);
    targets.push_back(tokens[k]);
  }
  return graph.cross_entropy(logits, rows, targets);
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------

TinyLm::TinyLm(ModelWeights weights) : weights_(std::make_shared<const ModelWeights>(std::move(weights))) {}

Generation TinyLm::greedy_generate(std::span<const TokenId> prefix, const SoftPrompt* prompt, std::size_t max_new,
                                   std::span<const TokenId> stop_tokens, bool record_logits) const {
  if (prefix.empty()) throw std::invalid_argument("greedy_generate: empty prefix");
  const std::size_t prompt_len = prompt ? prompt->length() : 0;
  std::vector<TokenId> seq(prefix.begin(), prefix.end());
  Generation gen;
  ForwardOptions opts;
  opts.last_row_only = true;
  for (std::size_t step = 0;; ++step) {
    if (step == max_new) {
      gen.reason = StopReason::max_new;
      break;
    }
    if (prompt_len + seq.size() >= config().max_seq) {
      gen.reason = StopReason::length_limit;
      break;
    }
    const auto pass = forward(seq, prompt, opts);
    const auto logits = pass.graph.value(pass.logits).values();
    const auto next = static_cast<TokenId>(argmax_lowest(logits));
    if (record_logits) gen.step_logits.emplace_back(logits.begin(), logits.end());
    if (std::find(stop_tokens.begin(), stop_tokens.end(), next) != stop_tokens.end()) {
      gen.reason = StopReason::stop_token;
      break;
    }
    gen.tokens.push_back(next);
    seq.push_back(next);
  }
  return gen;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[8] = {'P', 'F', 'L', 'W', 'C', 'K', 'P', 'T'};

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return value;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& weights, const nlohmann::json& metadata) {
  const auto names = ModelWeights::parameter_names(weights.config());
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = weights.config();
  header["metadata"] = metadata;
  header["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < names.size(); ++i)
    header["tensors"].push_back({{"name", names[i]}, {"shape", weights.tensors()[i].shape()}});
  const std::string text = header.dump();

  write_atomically(path, [&](std::ostream& os) {
    os.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(os, kCheckpointVersion);
    write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : weights.tensors())
      for (double v : t.values()) write_le<double>(os, v);
  });
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const auto header_len = read_le<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  const auto config = header.at("config").get<ModelConfig>();
  const auto expected = ModelWeights::parameter_shapes(config);
  const auto& entries = header.at("tensors");
  if (entries.size() != expected.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  std::vector<Tensor> tensors;
  tensors.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto shape = entries[i].at("shape").get<Shape>();
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    std::vector<double> data(n);
    for (auto& v : data) v = read_le<double>(is);
    tensors.emplace_back(shape, std::move(data));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
  return Checkpoint{ModelWeights::from_tensors(config, std::move(tensors)), header.at("metadata")};
}

}  // namespace pflow::lm
