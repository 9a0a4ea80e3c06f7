#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tmt/error.hpp"

namespace tmt {

/// Tensor extents, outermost first. An empty shape is a scalar.
using Shape = std::vector<int>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

/// Dense row-major tensor of 64-bit floats. Copies share the element
/// buffer; `mutable_data` detaches when shared. A tensor may carry a node
/// id into the thread's active gradient tape; tensors without one are
/// constants and never receive gradients.
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, double v);

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
  int64_t size() const noexcept { return static_cast<int64_t>(data_->size()); }

  const std::vector<double>& data() const noexcept { return *data_; }
  std::vector<double>& mutable_data();

  /// Value of a rank-0 or single-element tensor.
  double item() const;
  double at(std::initializer_list<int> idx) const;

  int node() const noexcept { return node_; }
  void set_node(int n) noexcept { node_ = n; }
  /// Same values, no tape node.
  Tensor detached() const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  int node_ = -1;
};

/// Leaf gradients produced by Tape::backward, keyed by node id.
class GradStore {
 public:
  bool has(const Tensor& t) const { return t.node() >= 0 && grads_.count(t.node()) > 0; }
  const Tensor& at(const Tensor& t) const;
  const Tensor& at_node(int node) const;

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> grads_;
};

/// Reverse-mode gradient tape. One tape may be active per thread at a
/// time; kernels append their backward rules to it whenever an input is
/// tracked. A tape is single-use: backward consumes it.
class Tape {
 public:
  /// Function that pulls the output gradient back onto the inputs via
  /// Tape::accumulate. Invoked with recording disabled.
  using PullFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  uint64_t id() const noexcept { return id_; }
  bool consumed() const noexcept { return consumed_; }
  size_t node_count() const noexcept { return nodes_.size(); }

  /// Registers `t` as a leaf. Call once per tensor per tape.
  int watch(Tensor& t);

  /// Appends an operation node; `pull` may be empty for leaves.
  int record(Shape out_shape, PullFn pull);

  /// Accumulates `g` into the gradient slot of `node`; only valid while a
  /// backward pass is running.
  void accumulate(int node, const Tensor& g);

  /// Propagates from a scalar loss to every leaf; zero-filled gradients
  /// for leaves the loss does not reach. Consumes the tape.
  GradStore backward(const Tensor& loss);

 private:
  struct Node {
    Shape shape;
    bool leaf = false;
    PullFn pull;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> has_grad_;
  bool consumed_ = false;
  bool in_backward_ = false;
  uint64_t id_;
};

// ---------------------------------------------------------------------
// Primitive kernels. Each checks operand shapes (ConformanceError on
// mismatch) and records its backward rule when an input is tracked.
// ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// Elementwise sum; `b` may also be rank-1 matching a's trailing extent
/// (bias broadcast over leading positions).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor exp(const Tensor& a);
/// Natural log; requires strictly positive input (NumericError).
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
/// Elementwise square root; negative input is a NumericError.
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor transpose(const Tensor& a);  // rank-2
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& a, int axis, int start, int len);

/// Gathers rows (axis 0); duplicate indices accumulate gradient.
Tensor gather_rows(const Tensor& a, const std::vector<int>& rows);
/// One element per row of a rank-2 tensor: out[i] = a[i, cols[i]].
Tensor pick(const Tensor& a, const std::vector<int>& cols);

/// Softmax over the last axis; rows sum to 1. Input must be finite
/// (NumericError otherwise).
Tensor softmax(const Tensor& a);
/// log(softmax(x)) computed stably in one step.
Tensor log_softmax(const Tensor& a);
/// out = mask != 0 ? value : a, with gradient only through kept entries.
Tensor masked_fill(const Tensor& a, const Tensor& mask, double value);

Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
/// Max over an axis; gradient routes to the first maximum.
Tensor max(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

namespace detail {
/// C = op(A) * op(B) without tape interaction; supports NN, NT, TN.
Tensor mm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b);
}  // namespace detail

}  // namespace tmt
