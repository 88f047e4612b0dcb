#pragma once

// Dense 64-bit tensors and a tape-based reverse-mode differentiation graph.
//
// The graph records one node per primitive. A node "requires grad" when it is
// a tracked leaf, when it was explicitly tracked (attention probabilities), or
// when any of its parents requires grad. Only those nodes get backward rules
// and gradient entries.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pflow::tensor {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Two-dimensional views. Rank-1 tensors act as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return data_; }
  // Raw write access for kernels and gradient accumulation. Callers that may
  // produce non-finite values must call check_finite() afterwards.
  std::span<double> mutable_values() { return data_; }

  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;
  void set(std::size_t r, std::size_t c, double value);
  void check_finite(const char* what) const;

  Tensor transposed() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

class Graph;

class Gradients {
 public:
  bool contains(NodeId id) const;
  const Tensor& at(NodeId id) const;
  std::size_t size() const;

 private:
  friend class Graph;
  std::vector<std::optional<Tensor>> grads_;
};

// Receives gradient contributions for the parents of the node being visited.
class GradSink {
 public:
  // Accumulation buffer for `id`, zero-initialised on first use. Null when
  // `id` does not require grad.
  Tensor* slot(NodeId id);

 private:
  friend class Graph;
  GradSink(const Graph& graph, std::vector<std::optional<Tensor>>& grads)
      : graph_(graph), grads_(grads) {}
  const Graph& graph_;
  std::vector<std::optional<Tensor>>& grads_;
};

class Graph {
 public:
  using BackwardFn = std::function<void(const Graph&, const Tensor& grad_out, GradSink&)>;

  NodeId constant(Tensor value);
  NodeId variable(Tensor value);
  // Marks a freshly created node as gradient-tracked. Must be called before
  // the node is consumed by another operation.
  NodeId track(NodeId id);

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);  // a · bᵀ
  NodeId add(NodeId a, NodeId b);
  NodeId add_row(NodeId a, NodeId row);  // broadcast a 1×n row over every row of a
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId softmax_rows(NodeId a);
  // Row softmax over entries j <= i; entries above the diagonal are exactly 0.
  NodeId causal_softmax(NodeId scores);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
  NodeId gelu(NodeId a);
  NodeId gather_rows(NodeId table, std::span<const std::int32_t> ids);
  NodeId concat_rows(NodeId top, NodeId bottom);
  NodeId slice_rows(NodeId a, std::size_t start, std::size_t count);
  // Sum over `rows` of -log softmax(logits[row])[target]. Scalar result.
  NodeId cross_entropy(NodeId logits, std::span<const std::size_t> rows,
                       std::span<const std::int32_t> targets);
  NodeId sum(NodeId a);

  Gradients backward(NodeId loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad = false;
    std::uint32_t consumers = 0;
  };

  NodeId push(Tensor value, std::vector<NodeId> parents, BackwardFn backward);
  bool any_requires_grad(std::initializer_list<NodeId> ids) const;

  friend class GradSink;
  std::vector<Node> nodes_;
};

// Inference helpers that operate on plain tensors.
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

}  // namespace pflow::tensor
