#include "pflow/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace pflow::tensor {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const MatR>;
using MutMap = Eigen::Map<MatR>;

ConstMap view(const Tensor& t) { return ConstMap(t.values().data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.mutable_values().data(), t.rows(), t.cols()); }

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                   " and " + shape_string(b.shape()));
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

void add_into(Tensor* dst, std::span<const double> src, double factor = 1.0) {
  if (dst == nullptr) return;
  auto out = dst->mutable_values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += factor * src[i];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
  check_finite("tensor construction");
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const {
  switch (shape_.size()) {
    case 0:
    case 1: return 1;
    case 2: return shape_[0];
    default: throw ShapeError("rows() on tensor of shape " + shape_string(shape_));
  }
}

std::size_t Tensor::cols() const {
  switch (shape_.size()) {
    case 0: return 1;
    case 1: return shape_[0];
    case 2: return shape_[1];
    default: throw ShapeError("cols() on tensor of shape " + shape_string(shape_));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

void Tensor::set(std::size_t r, std::size_t c, double value) {
  if (!std::isfinite(value)) throw NonFiniteError("Tensor::set: non-finite value");
  if (r >= rows() || c >= cols()) throw std::out_of_range("Tensor::set: index out of range");
  data_[r * cols() + c] = value;
}

void Tensor::check_finite(const char* what) const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(what) + ": non-finite value in tensor of shape " +
                           shape_string(shape_));
    }
  }
}

Tensor Tensor::transposed() const {
  require_matrix("transpose", *this);
  Tensor out = zeros({cols(), rows()});
  view(out) = view(*this).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Gradients

bool Gradients::contains(NodeId id) const {
  return id.index < grads_.size() && grads_[id.index].has_value();
}

const Tensor& Gradients::at(NodeId id) const {
  if (!contains(id)) throw std::out_of_range("no gradient recorded for node " + std::to_string(id.index));
  return *grads_[id.index];
}

std::size_t Gradients::size() const {
  return static_cast<std::size_t>(
      std::count_if(grads_.begin(), grads_.end(), [](const auto& g) { return g.has_value(); }));
}

Tensor* GradSink::slot(NodeId id) {
  if (!graph_.requires_grad(id)) return nullptr;
  auto& g = grads_[id.index];
  if (!g) g = Tensor::zeros(graph_.value(id).shape());
  return &*g;
}

// ---------------------------------------------------------------------------
// Graph

NodeId Graph::push(Tensor value, std::vector<NodeId> parents, BackwardFn backward) {
  bool needs = false;
  for (auto p : parents) {
    needs = needs || nodes_[p.index].requires_grad;
    ++nodes_[p.index].consumers;
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs;
  if (needs) {
    node.parents = std::move(parents);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

bool Graph::any_requires_grad(std::initializer_list<NodeId> ids) const {
  return std::any_of(ids.begin(), ids.end(), [this](NodeId id) { return requires_grad(id); });
}

NodeId Graph::constant(Tensor value) { return push(std::move(value), {}, {}); }

NodeId Graph::variable(Tensor value) {
  auto id = push(std::move(value), {}, {});
  nodes_[id.index].requires_grad = true;
  return id;
}

NodeId Graph::track(NodeId id) {
  auto& node = nodes_.at(id.index);
  if (node.consumers != 0) throw std::logic_error("Graph::track: node already consumed");
  node.requires_grad = true;
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require_matrix("matmul", av);
  require_matrix("matmul", bv);
  if (av.cols() != bv.rows()) shape_mismatch("matmul", av, bv);
  Tensor out = Tensor::zeros({av.rows(), bv.cols()});
  view(out).noalias() = view(av) * view(bv);
  out.check_finite("matmul");
  return push(std::move(out), {a, b}, [a, b](const Graph& g, const Tensor& go, GradSink& sink) {
    if (auto* da = sink.slot(a)) view(*da).noalias() += view(go) * view(g.value(b)).transpose();
    if (auto* db = sink.slot(b)) view(*db).noalias() += view(g.value(a)).transpose() * view(go);
  });
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require_matrix("matmul_nt", av);
  require_matrix("matmul_nt", bv);
  if (av.cols() != bv.cols()) shape_mismatch("matmul_nt", av, bv);
  Tensor out = Tensor::zeros({av.rows(), bv.rows()});
  view(out).noalias() = view(av) * view(bv).transpose();
  out.check_finite("matmul_nt");
  return push(std::move(out), {a, b}, [a, b](const Graph& g, const Tensor& go, GradSink& sink) {
    if (auto* da = sink.slot(a)) view(*da).noalias() += view(go) * view(g.value(b));
    if (auto* db = sink.slot(b)) view(*db).noalias() += view(go).transpose() * view(g.value(a));
  });
}

NodeId Graph::add(NodeId a, NodeId b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (!av.same_shape(bv)) shape_mismatch("add", av, bv);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av.values()[i] + bv.values()[i];
  return push(Tensor(av.shape(), std::move(out)), {a, b},
              [a, b](const Graph&, const Tensor& go, GradSink& sink) {
                add_into(sink.slot(a), go.values());
                add_into(sink.slot(b), go.values());
              });
}

NodeId Graph::add_row(NodeId a, NodeId row) {
  const auto& av = value(a);
  const auto& rv = value(row);
  require_matrix("add_row", av);
  if (rv.rows() != 1 || rv.cols() != av.cols()) shape_mismatch("add_row", av, rv);
  Tensor out = av;
  auto o = out.mutable_values();
  const auto r = rv.values();
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] += r[j];
  out.check_finite("add_row");
  return push(std::move(out), {a, row}, [a, row](const Graph&, const Tensor& go, GradSink& sink) {
    add_into(sink.slot(a), go.values());
    if (auto* dr = sink.slot(row)) {
      auto d = dr->mutable_values();
      const auto gv = go.values();
      const std::size_t n = d.size();
      for (std::size_t i = 0; i < go.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += gv[i * n + j];
    }
  });
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (!av.same_shape(bv)) shape_mismatch("mul", av, bv);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av.values()[i] * bv.values()[i];
  return push(Tensor(av.shape(), std::move(out)), {a, b},
              [a, b](const Graph& g, const Tensor& go, GradSink& sink) {
                const auto gv = go.values();
                if (auto* da = sink.slot(a)) {
                  auto d = da->mutable_values();
                  const auto other = g.value(b).values();
                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * other[i];
                }
                if (auto* db = sink.slot(b)) {
                  auto d = db->mutable_values();
                  const auto other = g.value(a).values();
                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * other[i];
                }
              });
}

NodeId Graph::scale(NodeId a, double factor) {
  const auto& av = value(a);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av.values()[i] * factor;
  return push(Tensor(av.shape(), std::move(out)), {a},
              [a, factor](const Graph&, const Tensor& go, GradSink& sink) {
                add_into(sink.slot(a), go.values(), factor);
              });
}

namespace {

// Softmax over the first `width(i)` entries of each row; the rest are zero.
template <typename Width>
Tensor row_softmax(const Tensor& x, Width width) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  std::vector<double> out(x.size(), 0.0);
  const auto in = x.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t w = width(i);
    const double* src = in.data() + i * cols;
    double* dst = out.data() + i * cols;
    const double m = *std::max_element(src, src + w);
    double total = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      dst[j] = std::exp(src[j] - m);
      total += dst[j];
    }
    for (std::size_t j = 0; j < w; ++j) dst[j] /= total;
  }
  return Tensor(x.shape(), std::move(out));
}

void softmax_backward(const Tensor& y, const Tensor& go, Tensor* dx) {
  if (dx == nullptr) return;
  const std::size_t rows = y.rows();
  const std::size_t cols = y.cols();
  const auto yv = y.values();
  const auto gv = go.values();
  auto d = dx->mutable_values();
  for (std::size_t i = 0; i < rows; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < cols; ++j) dot += yv[i * cols + j] * gv[i * cols + j];
    for (std::size_t j = 0; j < cols; ++j) d[i * cols + j] += yv[i * cols + j] * (gv[i * cols + j] - dot);
  }
}

}  // namespace

NodeId Graph::softmax_rows(NodeId a) {
  const auto& av = value(a);
  if (av.rank() > 2 || av.empty()) throw ShapeError("softmax_rows: bad shape " + shape_string(av.shape()));
  const std::size_t cols = av.cols();
  auto id = push(row_softmax(av, [cols](std::size_t) { return cols; }), {a}, {});
  if (requires_grad(id)) {
    nodes_[id.index].backward = [a, id](const Graph& g, const Tensor& go, GradSink& sink) {
      softmax_backward(g.value(id), go, sink.slot(a));
    };
  }
  return id;
}

NodeId Graph::causal_softmax(NodeId scores) {
  const auto& sv = value(scores);
  require_matrix("causal_softmax", sv);
  if (sv.rows() != sv.cols()) throw ShapeError("causal_softmax: expected square scores, got " + shape_string(sv.shape()));
  auto id = push(row_softmax(sv, [](std::size_t i) { return i + 1; }), {scores}, {});
  if (requires_grad(id)) {
    nodes_[id.index].backward = [scores, id](const Graph& g, const Tensor& go, GradSink& sink) {
      softmax_backward(g.value(id), go, sink.slot(scores));
    };
  }
  return id;
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  const auto& xv = value(x);
  const auto& gv = value(gamma);
  const auto& bv = value(beta);
  require_matrix("layer_norm", xv);
  const std::size_t rows = xv.rows();
  const std::size_t n = xv.cols();
  if (gv.size() != n) shape_mismatch("layer_norm", xv, gv);
  if (bv.size() != n) shape_mismatch("layer_norm", xv, bv);

  std::vector<double> out(xv.size());
  const auto in = xv.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = in.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += r[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = (r[j] - mean) * rstd * gv.values()[j] + bv.values()[j];
  }
  Tensor result(xv.shape(), std::move(out));
  return push(std::move(result), {x, gamma, beta},
              [x, gamma, beta, eps](const Graph& g, const Tensor& go, GradSink& sink) {
                const auto& xv = g.value(x);
                const auto gam = g.value(gamma).values();
                const std::size_t rows = xv.rows();
                const std::size_t n = xv.cols();
                auto* dx = sink.slot(x);
                auto* dg = sink.slot(gamma);
                auto* db = sink.slot(beta);
                std::vector<double> xhat(n), dxhat(n);
                for (std::size_t i = 0; i < rows; ++i) {
                  const double* r = xv.values().data() + i * n;
                  const double* gr = go.values().data() + i * n;
                  double mean = 0.0;
                  for (std::size_t j = 0; j < n; ++j) mean += r[j];
                  mean /= static_cast<double>(n);
                  double var = 0.0;
                  for (std::size_t j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
                  var /= static_cast<double>(n);
                  const double rstd = 1.0 / std::sqrt(var + eps);
                  double mean_d = 0.0, mean_dx = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    xhat[j] = (r[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gam[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * xhat[j];
                  }
                  mean_d /= static_cast<double>(n);
                  mean_dx /= static_cast<double>(n);
                  if (dg) {
                    auto d = dg->mutable_values();
                    for (std::size_t j = 0; j < n; ++j) d[j] += gr[j] * xhat[j];
                  }
                  if (db) {
                    auto d = db->mutable_values();
                    for (std::size_t j = 0; j < n; ++j) d[j] += gr[j];
                  }
                  if (dx) {
                    double* d = dx->mutable_values().data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) d[j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                  }
                }
              });
}

NodeId Graph::gelu(NodeId a) {
  const auto& av = value(a);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av.values()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  return push(Tensor(av.shape(), std::move(out)), {a}, [a](const Graph& g, const Tensor& go, GradSink& sink) {
    auto* da = sink.slot(a);
    if (!da) return;
    auto d = da->mutable_values();
    const auto xs = g.value(a).values();
    const auto gv = go.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x = xs[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      d[i] += gv[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

NodeId Graph::gather_rows(NodeId table, std::span<const std::int32_t> ids) {
  const auto& tv = value(table);
  require_matrix("gather_rows", tv);
  const std::size_t n = tv.cols();
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.values().data() + static_cast<std::size_t>(ids[i]) * n, n, out.data() + i * n);
  }
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  return push(Tensor({ids.size(), n}, std::move(out)), {table},
              [table, kept = std::move(kept), n](const Graph&, const Tensor& go, GradSink& sink) {
                auto* dt = sink.slot(table);
                if (!dt) return;
                auto d = dt->mutable_values();
                const auto gv = go.values();
                for (std::size_t i = 0; i < kept.size(); ++i)
                  for (std::size_t j = 0; j < n; ++j) d[static_cast<std::size_t>(kept[i]) * n + j] += gv[i * n + j];
              });
}

NodeId Graph::concat_rows(NodeId top, NodeId bottom) {
  const auto& tv = value(top);
  const auto& bv = value(bottom);
  require_matrix("concat_rows", tv);
  require_matrix("concat_rows", bv);
  if (tv.cols() != bv.cols()) shape_mismatch("concat_rows", tv, bv);
  std::vector<double> out;
  out.reserve(tv.size() + bv.size());
  out.insert(out.end(), tv.values().begin(), tv.values().end());
  out.insert(out.end(), bv.values().begin(), bv.values().end());
  const std::size_t split = tv.size();
  return push(Tensor({tv.rows() + bv.rows(), tv.cols()}, std::move(out)), {top, bottom},
              [top, bottom, split](const Graph&, const Tensor& go, GradSink& sink) {
                const auto gv = go.values();
                add_into(sink.slot(top), gv.subspan(0, split));
                add_into(sink.slot(bottom), gv.subspan(split));
              });
}

NodeId Graph::slice_rows(NodeId a, std::size_t start, std::size_t count) {
  const auto& av = value(a);
  require_matrix("slice_rows", av);
  if (start + count > av.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(av.shape()));
  }
  const std::size_t n = av.cols();
  std::vector<double> out(av.values().begin() + static_cast<std::ptrdiff_t>(start * n),
                          av.values().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return push(Tensor({count, n}, std::move(out)), {a},
              [a, start, n](const Graph&, const Tensor& go, GradSink& sink) {
                auto* da = sink.slot(a);
                if (!da) return;
                auto d = da->mutable_values().subspan(start * n, go.size());
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += go.values()[i];
              });
}

NodeId Graph::cross_entropy(NodeId logits, std::span<const std::size_t> rows,
                            std::span<const std::int32_t> targets) {
  const auto& lv = value(logits);
  require_matrix("cross_entropy", lv);
  if (rows.size() != targets.size()) throw ShapeError("cross_entropy: rows and targets differ in length");
  const std::size_t n = lv.cols();
  double loss = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= lv.rows()) throw std::out_of_range("cross_entropy: row outside logits");
    if (targets[k] < 0 || static_cast<std::size_t>(targets[k]) >= n)
      throw std::out_of_range("cross_entropy: target outside vocabulary");
    const auto lsm = log_softmax(lv.values().subspan(rows[k] * n, n));
    loss -= lsm[static_cast<std::size_t>(targets[k])];
  }
  std::vector<std::size_t> kept_rows(rows.begin(), rows.end());
  std::vector<std::int32_t> kept_targets(targets.begin(), targets.end());
  return push(Tensor::scalar(loss), {logits},
              [logits, kept_rows = std::move(kept_rows), kept_targets = std::move(kept_targets), n](
                  const Graph& g, const Tensor& go, GradSink& sink) {
                auto* dl = sink.slot(logits);
                if (!dl) return;
                const double scale = go.item();
                auto d = dl->mutable_values();
                const auto lv = g.value(logits).values();
                for (std::size_t k = 0; k < kept_rows.size(); ++k) {
                  const auto p = softmax(lv.subspan(kept_rows[k] * n, n));
                  double* row = d.data() + kept_rows[k] * n;
                  for (std::size_t j = 0; j < n; ++j) row[j] += scale * p[j];
                  row[static_cast<std::size_t>(kept_targets[k])] -= scale;
                }
              });
}

NodeId Graph::sum(NodeId a) {
  const auto& av = value(a);
  double total = 0.0;
  for (double v : av.values()) total += v;
  return push(Tensor::scalar(total), {a}, [a](const Graph&, const Tensor& go, GradSink& sink) {
    auto* da = sink.slot(a);
    if (!da) return;
    const double g = go.item();
    for (double& v : da->mutable_values()) v += g;
  });
}

Gradients Graph::backward(NodeId loss) const {
  const auto& lv = value(loss);
  if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_string(lv.shape()));
  Gradients out;
  out.grads_.resize(nodes_.size());
  if (!requires_grad(loss)) return out;
  GradSink sink(*this, out.grads_);
  out.grads_[loss.index] = Tensor::filled(lv.shape(), 1.0);
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    const auto& node = nodes_[i];
    if (!node.requires_grad || !node.backward || !out.grads_[i]) continue;
    node.backward(*this, *out.grads_[i], sink);
  }
  for (const auto& g : out.grads_)
    if (g) g->check_finite("backward");
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> log_softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - m);
  const double lse = m + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

}  // namespace pflow::tensor
