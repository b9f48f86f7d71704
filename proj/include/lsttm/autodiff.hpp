#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Graphs are built define-by-run: every op call allocates a Node that keeps
// its inputs alive. Backward rules are themselves written in terms of ops, so
// grad(..., create_graph = true) yields differentiable gradients (used for
// exact second-order meta-gradients). Vectors are n x 1 matrices and scalars
// are 1 x 1.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lsttm::ad {

using Array = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using IndexList = std::shared_ptr<const std::vector<Index>>;

/// Raised for incompatible operand shapes or out-of-range indices.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kAdd,
  kMul,
  kConcat,
  kSlice,
  kPad,
  kReshape,
  kLeakyRelu,
  kSigmoid,
  kSoftmax,
  kLog,
  kReciprocal,
  kSum,
  kMean,
  kDot,
  kGather,
  kScatterAdd,
  kSumTo,
  kBroadcastTo,
};

std::string_view op_name(OpKind op);

struct OpAttrs {
  bool transpose_a = false;
  bool transpose_b = false;
  double slope = 0.0;
  int axis = 0;
  Index offset = 0;
  Index extent = 0;
  // gather / scatter rows, softmax segment ids
  IndexList indices;
};

struct Node {
  Array value;
  Array grad;
  OpKind op = OpKind::kLeaf;
  OpAttrs attrs;
  std::vector<std::shared_ptr<Node>> inputs;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Array& value() const { return node_->value; }
  // Gradient accumulated by backward(); zero until then, same shape as value.
  const Array& grad() const;
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }
  OpKind op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var leaf(Array value, bool requires_grad = true);
Var constant(Array value);
Var scalar(double value);
Var detach(const Var& x);

// --- op catalog ---------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
// Elementwise with 2-D broadcasting: each dimension must match or be 1.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(const Var& x, int axis, Index offset, Index length);
Var pad(const Var& x, int axis, Index offset, Index total);
Var reshape(const Var& x, Index rows, Index cols);
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
// Softmax over a column vector.
Var softmax(const Var& x);
// Independent softmax over each group of rows sharing a segment id.
Var segment_softmax(const Var& x, IndexList segments, Index segment_count);
Var log(const Var& x);
Var reciprocal(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
Var dot(const Var& a, const Var& b);
Var gather(const Var& table, IndexList rows);
// out[rows[i]] += x[i]; out has `count` rows.
Var scatter_add(const Var& x, IndexList rows, Index count);
// Sums broadcast dimensions away; target dims must equal the input's or be 1.
Var sum_to(const Var& x, Index rows, Index cols);
Var broadcast_to(const Var& x, Index rows, Index cols);

// --- composites ---------------------------------------------------------

Var neg(const Var& x);
Var sub(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var row_dot(const Var& a, const Var& b);

IndexList make_indices(std::vector<Index> values);

// --- differentiation ----------------------------------------------------

using GradMap = std::map<std::uint64_t, Array>;

/// Accumulates d root / d node into every reachable node's grad and returns
/// the leaf gradients keyed by node id. Root must be 1 x 1.
GradMap backward(const Var& root);

/// Gradients of root with respect to `wrt`, zero for unreachable leaves.
/// With create_graph the results are themselves differentiable.
std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph = false);

class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(std::size_t tensor, Index coordinate, const std::string& what)
      : std::runtime_error(what), tensor_(tensor), coordinate_(coordinate) {}
  std::size_t tensor() const { return tensor_; }
  Index coordinate() const { return coordinate_; }

 private:
  std::size_t tensor_;
  Index coordinate_;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  Index worst_coordinate = 0;
};

using TensorFunction = std::function<Var(std::span<const Var>)>;

/// Compares analytic gradients with central differences, coordinate by
/// coordinate: max |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(const TensorFunction& f, std::span<const Array> point, double step = 1e-4);
double grad_check(const std::function<Var(const Var&)>& f, const Array& point, double step = 1e-4);

std::string shape_string(const Array& a);

}  // namespace lsttm::ad
