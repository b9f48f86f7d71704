#include "lsttm/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace lsttm::ad {
namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<Node> make_node(Array value, OpKind op, std::vector<std::shared_ptr<Node>> inputs,
                                 OpAttrs attrs = {}) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->attrs = std::move(attrs);
    }
  }
  return node;
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

std::string shapes(const Array& a, const Array& b) { return shape_string(a) + " and " + shape_string(b); }

Index broadcast_dim(Index a, Index b, bool& ok) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  ok = false;
  return 0;
}

Array expand(const Array& a, Index rows, Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  return a.replicate(rows / a.rows(), cols / a.cols());
}

template <typename F>
Array elementwise(std::string_view name, const Array& a, const Array& b, F f) {
  bool ok = true;
  const Index rows = broadcast_dim(a.rows(), b.rows(), ok);
  const Index cols = broadcast_dim(a.cols(), b.cols(), ok);
  if (!ok) shape_fail(name, "cannot broadcast " + shapes(a, b));
  if (a.rows() == rows && a.cols() == cols && b.rows() == rows && b.cols() == cols) {
    return f(a.array(), b.array()).matrix();
  }
  if (b.size() == 1 && a.rows() == rows && a.cols() == cols) {
    return f(a.array(), Array::Constant(rows, cols, b(0, 0)).array()).matrix();
  }
  const Array ea = expand(a, rows, cols);
  const Array eb = expand(b, rows, cols);
  return f(ea.array(), eb.array()).matrix();
}

void check_rows(std::string_view name, const std::vector<Index>& rows, Index bound) {
  for (const Index r : rows) {
    if (r < 0 || r >= bound) {
      shape_fail(name, "row index " + std::to_string(r) + " outside [0, " + std::to_string(bound) + ")");
    }
  }
}

// Rules return one entry per input; entries for inputs without
// requires_grad may be left undefined.
std::vector<Var> input_grads(const std::shared_ptr<Node>& node, const Var& g) {
  const Var self(node);
  const auto& in = node->inputs;
  const OpAttrs& at = node->attrs;
  std::vector<Var> out(in.size());
  auto wants = [&](std::size_t i) { return in[i]->requires_grad; };

  switch (node->op) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatmul: {
      const Var a(in[0]);
      const Var b(in[1]);
      const bool ta = at.transpose_a;
      const bool tb = at.transpose_b;
      if (wants(0)) out[0] = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
      if (wants(1)) out[1] = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
      break;
    }
    case OpKind::kAdd:
      for (std::size_t i = 0; i < 2; ++i) {
        if (wants(i)) out[i] = sum_to(g, in[i]->value.rows(), in[i]->value.cols());
      }
      break;
    case OpKind::kMul:
      if (wants(0)) out[0] = sum_to(mul(g, Var(in[1])), in[0]->value.rows(), in[0]->value.cols());
      if (wants(1)) out[1] = sum_to(mul(g, Var(in[0])), in[1]->value.rows(), in[1]->value.cols());
      break;
    case OpKind::kConcat: {
      Index offset = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        const Index len = at.axis == 0 ? in[i]->value.rows() : in[i]->value.cols();
        if (wants(i)) out[i] = slice(g, at.axis, offset, len);
        offset += len;
      }
      break;
    }
    case OpKind::kSlice: {
      const Index total = at.axis == 0 ? in[0]->value.rows() : in[0]->value.cols();
      out[0] = pad(g, at.axis, at.offset, total);
      break;
    }
    case OpKind::kPad: {
      const Index len = at.axis == 0 ? in[0]->value.rows() : in[0]->value.cols();
      out[0] = slice(g, at.axis, at.offset, len);
      break;
    }
    case OpKind::kReshape:
      out[0] = reshape(g, in[0]->value.rows(), in[0]->value.cols());
      break;
    case OpKind::kLeakyRelu: {
      const Array& x = in[0]->value;
      Array mask = (x.array() > 0.0).select(Array::Ones(x.rows(), x.cols()), at.slope);
      out[0] = mul(g, constant(std::move(mask)));
      break;
    }
    case OpKind::kSigmoid:
      out[0] = mul(g, mul(self, sub(scalar(1.0), self)));
      break;
    case OpKind::kSoftmax:
      if (at.indices) {
        const Var weighted = mul(g, self);
        const Var totals = scatter_add(weighted, at.indices, at.extent);
        out[0] = mul(self, sub(g, gather(totals, at.indices)));
      } else {
        out[0] = mul(self, sub(g, sum(mul(g, self))));
      }
      break;
    case OpKind::kLog:
      out[0] = mul(g, reciprocal(Var(in[0])));
      break;
    case OpKind::kReciprocal:
      out[0] = neg(mul(g, mul(self, self)));
      break;
    case OpKind::kSum:
      out[0] = broadcast_to(g, in[0]->value.rows(), in[0]->value.cols());
      break;
    case OpKind::kMean: {
      const double n = static_cast<double>(in[0]->value.size());
      out[0] = broadcast_to(scale(g, 1.0 / n), in[0]->value.rows(), in[0]->value.cols());
      break;
    }
    case OpKind::kDot:
      if (wants(0)) out[0] = mul(Var(in[1]), g);
      if (wants(1)) out[1] = mul(Var(in[0]), g);
      break;
    case OpKind::kGather:
      out[0] = scatter_add(g, at.indices, in[0]->value.rows());
      break;
    case OpKind::kScatterAdd:
      out[0] = gather(g, at.indices);
      break;
    case OpKind::kSumTo:
      out[0] = broadcast_to(g, in[0]->value.rows(), in[0]->value.cols());
      break;
    case OpKind::kBroadcastTo:
      out[0] = sum_to(g, in[0]->value.rows(), in[0]->value.cols());
      break;
  }
  return out;
}

// Post-order over nodes that require grad (inputs before consumers).
std::vector<std::shared_ptr<Node>> topo_order(const std::shared_ptr<Node>& root) {
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<const Node*> visited;
  struct Frame {
    std::shared_ptr<Node> node;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  if (!root->requires_grad) return order;
  stack.push_back({root, 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next < top.node->inputs.size()) {
      const auto& child = top.node->inputs[top.next++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(top.node);
    stack.pop_back();
  }
  return order;
}

void require_scalar(std::string_view what, const Var& root) {
  if (!root.defined()) throw std::invalid_argument(std::string(what) + ": undefined root");
  if (root.value().size() != 1) {
    throw ShapeError(std::string(what) + ": root must be scalar, got " + shape_string(root.value()));
  }
}

struct Propagation {
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_map<const Node*, Var> grads;
};

Propagation propagate(const Var& root, bool create_graph) {
  Propagation p;
  p.order = topo_order(root.node());
  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();
  p.grads.emplace(root.node().get(), constant(Array::Ones(1, 1)));
  for (auto it = p.order.rbegin(); it != p.order.rend(); ++it) {
    const auto& node = *it;
    if (node->op == OpKind::kLeaf) continue;
    auto found = p.grads.find(node.get());
    if (found == p.grads.end()) continue;
    const Var g = found->second;
    std::vector<Var> gs = input_grads(node, g);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (!gs[i].defined() || !node->inputs[i]->requires_grad) continue;
      const Node* key = node->inputs[i].get();
      auto slot = p.grads.find(key);
      if (slot == p.grads.end()) {
        p.grads.emplace(key, gs[i]);
      } else {
        slot->second = add(slot->second, gs[i]);
      }
    }
  }
  return p;
}

}  // namespace

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kPad: return "pad";
    case OpKind::kReshape: return "reshape";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLog: return "log";
    case OpKind::kReciprocal: return "reciprocal";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kDot: return "dot";
    case OpKind::kGather: return "gather";
    case OpKind::kScatterAdd: return "scatter_add";
    case OpKind::kSumTo: return "sum_to";
    case OpKind::kBroadcastTo: return "broadcast_to";
  }
  return "unknown";
}

std::string shape_string(const Array& a) {
  return "[" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + "]";
}

const Array& Var::grad() const {
  if (node_->grad.rows() != node_->value.rows() || node_->grad.cols() != node_->value.cols()) {
    node_->grad = Array::Zero(node_->value.rows(), node_->value.cols());
  }
  return node_->grad;
}

double Var::item() const {
  if (node_->value.size() != 1) throw ShapeError("item: expected 1x1, got " + shape_string(node_->value));
  return node_->value(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var leaf(Array value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var constant(Array value) { return leaf(std::move(value), false); }

Var scalar(double value) { return constant(Array::Constant(1, 1, value)); }

Var detach(const Var& x) { return constant(x.value()); }

IndexList make_indices(std::vector<Index> values) {
  return std::make_shared<const std::vector<Index>>(std::move(values));
}

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  const Index inner_a = transpose_a ? av.rows() : av.cols();
  const Index inner_b = transpose_b ? bv.cols() : bv.rows();
  if (inner_a != inner_b) {
    shape_fail("matmul", "inner dimensions differ for " + shapes(av, bv) + " (transpose " +
                             std::to_string(transpose_a) + "," + std::to_string(transpose_b) + ")");
  }
  Array out;
  if (!transpose_a && !transpose_b) {
    out.noalias() = av * bv;
  } else if (transpose_a && !transpose_b) {
    out.noalias() = av.transpose() * bv;
  } else if (!transpose_a && transpose_b) {
    out.noalias() = av * bv.transpose();
  } else {
    out.noalias() = av.transpose() * bv.transpose();
  }
  OpAttrs at;
  at.transpose_a = transpose_a;
  at.transpose_b = transpose_b;
  return Var(make_node(std::move(out), OpKind::kMatmul, {a.node(), b.node()}, at));
}

Var add(const Var& a, const Var& b) {
  Array out = elementwise("add", a.value(), b.value(), [](const auto& x, const auto& y) { return x + y; });
  return Var(make_node(std::move(out), OpKind::kAdd, {a.node(), b.node()}));
}

Var mul(const Var& a, const Var& b) {
  Array out = elementwise("mul", a.value(), b.value(), [](const auto& x, const auto& y) { return x * y; });
  return Var(make_node(std::move(out), OpKind::kMul, {a.node(), b.node()}));
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  if (axis != 0 && axis != 1) shape_fail("concat", "axis must be 0 or 1");
  Index rows = 0;
  Index cols = 0;
  for (const Var& p : parts) {
    const Array& v = p.value();
    const Index other = axis == 0 ? v.cols() : v.rows();
    const Index first = axis == 0 ? parts[0].cols() : parts[0].rows();
    if (other != first) shape_fail("concat", "mismatched " + shapes(parts[0].value(), v));
    if (axis == 0) {
      rows += v.rows();
      cols = v.cols();
    } else {
      cols += v.cols();
      rows = v.rows();
    }
  }
  Array out(rows, cols);
  Index offset = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  inputs.reserve(parts.size());
  for (const Var& p : parts) {
    const Array& v = p.value();
    if (axis == 0) {
      out.middleRows(offset, v.rows()) = v;
      offset += v.rows();
    } else {
      out.middleCols(offset, v.cols()) = v;
      offset += v.cols();
    }
    inputs.push_back(p.node());
  }
  OpAttrs at;
  at.axis = axis;
  return Var(make_node(std::move(out), OpKind::kConcat, std::move(inputs), at));
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(const Var& x, int axis, Index offset, Index length) {
  const Array& v = x.value();
  const Index extent = axis == 0 ? v.rows() : v.cols();
  if ((axis != 0 && axis != 1) || offset < 0 || length < 0 || offset + length > extent) {
    shape_fail("slice", "range [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                            ") on axis " + std::to_string(axis) + " of " + shape_string(v));
  }
  Array out = axis == 0 ? Array(v.middleRows(offset, length)) : Array(v.middleCols(offset, length));
  OpAttrs at;
  at.axis = axis;
  at.offset = offset;
  return Var(make_node(std::move(out), OpKind::kSlice, {x.node()}, at));
}

Var pad(const Var& x, int axis, Index offset, Index total) {
  const Array& v = x.value();
  const Index extent = axis == 0 ? v.rows() : v.cols();
  if ((axis != 0 && axis != 1) || offset < 0 || offset + extent > total) {
    shape_fail("pad", "cannot place " + shape_string(v) + " at " + std::to_string(offset) + " within " +
                          std::to_string(total));
  }
  Array out;
  if (axis == 0) {
    out = Array::Zero(total, v.cols());
    out.middleRows(offset, extent) = v;
  } else {
    out = Array::Zero(v.rows(), total);
    out.middleCols(offset, extent) = v;
  }
  OpAttrs at;
  at.axis = axis;
  at.offset = offset;
  return Var(make_node(std::move(out), OpKind::kPad, {x.node()}, at));
}

Var reshape(const Var& x, Index rows, Index cols) {
  const Array& v = x.value();
  if (rows * cols != v.size()) {
    shape_fail("reshape", shape_string(v) + " to [" + std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  Array out = Eigen::Map<const Array>(v.data(), rows, cols);
  return Var(make_node(std::move(out), OpKind::kReshape, {x.node()}));
}

Var leaky_relu(const Var& x, double slope) {
  const Array& v = x.value();
  Array out = (v.array() > 0.0).select(v, v * slope);
  OpAttrs at;
  at.slope = slope;
  return Var(make_node(std::move(out), OpKind::kLeakyRelu, {x.node()}, at));
}

Var sigmoid(const Var& x) {
  Array out = x.value().unaryExpr([](double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  });
  return Var(make_node(std::move(out), OpKind::kSigmoid, {x.node()}));
}

Var softmax(const Var& x) {
  const Array& v = x.value();
  if (v.cols() != 1 || v.rows() == 0) shape_fail("softmax", "expected non-empty column vector, got " + shape_string(v));
  const double m = v.maxCoeff();
  Array out = (v.array() - m).exp().matrix();
  out /= out.sum();
  return Var(make_node(std::move(out), OpKind::kSoftmax, {x.node()}));
}

Var segment_softmax(const Var& x, IndexList segments, Index segment_count) {
  const Array& v = x.value();
  if (v.cols() != 1) shape_fail("softmax", "expected column vector, got " + shape_string(v));
  if (!segments || static_cast<Index>(segments->size()) != v.rows()) {
    shape_fail("softmax", "segment ids do not cover " + shape_string(v));
  }
  check_rows("softmax", *segments, segment_count);
  std::vector<double> maxima(static_cast<std::size_t>(segment_count), -std::numeric_limits<double>::infinity());
  for (Index i = 0; i < v.rows(); ++i) {
    auto& m = maxima[static_cast<std::size_t>((*segments)[i])];
    m = std::max(m, v(i, 0));
  }
  Array out(v.rows(), 1);
  std::vector<double> totals(static_cast<std::size_t>(segment_count), 0.0);
  for (Index i = 0; i < v.rows(); ++i) {
    const auto s = static_cast<std::size_t>((*segments)[i]);
    out(i, 0) = std::exp(v(i, 0) - maxima[s]);
    totals[s] += out(i, 0);
  }
  for (Index i = 0; i < v.rows(); ++i) out(i, 0) /= totals[static_cast<std::size_t>((*segments)[i])];
  OpAttrs at;
  at.indices = std::move(segments);
  at.extent = segment_count;
  return Var(make_node(std::move(out), OpKind::kSoftmax, {x.node()}, at));
}

Var log(const Var& x) {
  Array out = x.value().array().log().matrix();
  return Var(make_node(std::move(out), OpKind::kLog, {x.node()}));
}

Var reciprocal(const Var& x) {
  Array out = x.value().array().inverse().matrix();
  return Var(make_node(std::move(out), OpKind::kReciprocal, {x.node()}));
}

Var sum(const Var& x) { return Var(make_node(Array::Constant(1, 1, x.value().sum()), OpKind::kSum, {x.node()})); }

Var mean(const Var& x) {
  if (x.value().size() == 0) shape_fail("mean", "empty input");
  return Var(make_node(Array::Constant(1, 1, x.value().mean()), OpKind::kMean, {x.node()}));
}

Var dot(const Var& a, const Var& b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_fail("dot", "mismatched " + shapes(av, bv));
  const double d = (av.array() * bv.array()).sum();
  return Var(make_node(Array::Constant(1, 1, d), OpKind::kDot, {a.node(), b.node()}));
}

Var gather(const Var& table, IndexList rows) {
  if (!rows) shape_fail("gather", "missing row indices");
  const Array& t = table.value();
  check_rows("gather", *rows, t.rows());
  Array out(static_cast<Index>(rows->size()), t.cols());
  for (Index i = 0; i < out.rows(); ++i) out.row(i) = t.row((*rows)[i]);
  OpAttrs at;
  at.indices = std::move(rows);
  return Var(make_node(std::move(out), OpKind::kGather, {table.node()}, at));
}

Var scatter_add(const Var& x, IndexList rows, Index count) {
  if (!rows) shape_fail("scatter_add", "missing row indices");
  const Array& v = x.value();
  if (static_cast<Index>(rows->size()) != v.rows()) {
    shape_fail("scatter_add", std::to_string(rows->size()) + " indices for " + shape_string(v));
  }
  check_rows("scatter_add", *rows, count);
  Array out = Array::Zero(count, v.cols());
  for (Index i = 0; i < v.rows(); ++i) out.row((*rows)[i]) += v.row(i);
  OpAttrs at;
  at.indices = std::move(rows);
  at.extent = count;
  return Var(make_node(std::move(out), OpKind::kScatterAdd, {x.node()}, at));
}

Var sum_to(const Var& x, Index rows, Index cols) {
  const Array& v = x.value();
  if (v.rows() == rows && v.cols() == cols) return x;
  const bool rows_ok = rows == v.rows() || rows == 1;
  const bool cols_ok = cols == v.cols() || cols == 1;
  if (!rows_ok || !cols_ok) {
    shape_fail("sum_to", shape_string(v) + " to [" + std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  Array out;
  if (rows == 1 && cols == 1) {
    out = Array::Constant(1, 1, v.sum());
  } else if (rows == 1) {
    out = v.colwise().sum();
  } else {
    out = v.rowwise().sum();
  }
  return Var(make_node(std::move(out), OpKind::kSumTo, {x.node()}));
}

Var broadcast_to(const Var& x, Index rows, Index cols) {
  const Array& v = x.value();
  if (v.rows() == rows && v.cols() == cols) return x;
  const bool rows_ok = v.rows() == rows || v.rows() == 1;
  const bool cols_ok = v.cols() == cols || v.cols() == 1;
  if (!rows_ok || !cols_ok) {
    shape_fail("broadcast_to",
               shape_string(v) + " to [" + std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  return Var(make_node(expand(v, rows, cols), OpKind::kBroadcastTo, {x.node()}));
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

Var scale(const Var& x, double factor) { return mul(x, scalar(factor)); }

Var row_dot(const Var& a, const Var& b) { return sum_to(mul(a, b), a.rows(), 1); }

GradMap backward(const Var& root) {
  require_scalar("backward", root);
  GradMap leaves;
  Propagation p = propagate(root, false);
  root.node()->grad = Array::Ones(1, 1);
  for (const auto& node : p.order) {
    auto found = p.grads.find(node.get());
    if (found == p.grads.end()) continue;
    const Array& g = found->second.value();
    if (node.get() != root.node().get()) {
      if (node->grad.rows() != g.rows() || node->grad.cols() != g.cols()) {
        node->grad = g;
      } else {
        node->grad += g;
      }
    }
    if (node->op == OpKind::kLeaf) leaves.emplace(node->id, g);
  }
  return leaves;
}

std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph) {
  require_scalar("grad", root);
  Propagation p = propagate(root, create_graph);
  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto found = p.grads.find(w.node().get());
    if (found != p.grads.end()) {
      out.push_back(found->second);
    } else {
      out.push_back(constant(Array::Zero(w.rows(), w.cols())));
    }
  }
  return out;
}

GradCheckResult grad_check(const TensorFunction& f, std::span<const Array> point, double step) {
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const Array& p : point) leaves.push_back(leaf(p));
  const Var y = f(leaves);
  require_scalar("grad_check", y);
  const std::vector<Var> analytic = grad(y, leaves);

  NoGradGuard guard;
  std::vector<Array> probe(point.begin(), point.end());
  auto evaluate = [&]() {
    std::vector<Var> args;
    args.reserve(probe.size());
    for (const Array& p : probe) args.push_back(constant(p));
    return f(args).item();
  };

  GradCheckResult result;
  for (std::size_t t = 0; t < probe.size(); ++t) {
    Array& x = probe[t];
    for (Index i = 0; i < x.size(); ++i) {
      double& coord = x.data()[i];
      const double original = coord;
      coord = original + step;
      const double plus = evaluate();
      coord = original - step;
      const double minus = evaluate();
      coord = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        std::ostringstream msg;
        msg << "grad_check: non-finite value at tensor " << t << " coordinate " << i;
        throw GradCheckError(t, i, msg.str());
      }
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[t].value().data()[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_tensor = t;
        result.worst_coordinate = i;
      }
    }
  }
  return result;
}

double grad_check(const std::function<Var(const Var&)>& f, const Array& point, double step) {
  const std::vector<Array> points{point};
  return grad_check([&](std::span<const Var> xs) { return f(xs[0]); }, points, step).max_relative_error;
}

}  // namespace lsttm::ad
