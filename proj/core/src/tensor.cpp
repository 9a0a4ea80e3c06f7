#include "tmt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace tmt {

namespace {

thread_local Tape* g_active_tape = nullptr;

// Returns the tape to record on, or nullptr when no input is tracked.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* t = Tape::active();
  if (!t) return nullptr;
  for (const Tensor* in : inputs)
    if (in->node() >= 0) return t;
  return nullptr;
}

// RAII guard that suspends recording for the duration of a backward rule.
struct NoRecord {
  Tape* saved;
  NoRecord() : saved(g_active_tape) { g_active_tape = nullptr; }
  ~NoRecord() { g_active_tape = saved; }
};

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ConformanceError(msg(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                               shape_str(b.shape())));
}

int64_t row_major_offset(const Shape& shape, std::initializer_list<int> idx) {
  if (static_cast<int>(idx.size()) != static_cast<int>(shape.size()))
    throw ConformanceError(msg("index rank ", idx.size(), " does not match tensor rank ",
                               shape.size()));
  int64_t off = 0;
  auto it = idx.begin();
  for (size_t d = 0; d < shape.size(); ++d, ++it) {
    if (*it < 0 || *it >= shape[d])
      throw ConformanceError(msg("index ", *it, " out of range for axis ", d, " with extent ",
                                 shape[d]));
    off = off * shape[d] + *it;
  }
  return off;
}

}  // namespace

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e < 0) throw ConformanceError(msg("negative extent in shape ", shape_str(s)));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<size_t>(shape_size(shape_)), 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (static_cast<int64_t>(values.size()) != shape_size(shape_))
    throw ConformanceError(msg("value count ", values.size(), " does not fill shape ",
                               shape_str(shape_)));
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::filled(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.mutable_data().begin(), t.mutable_data().end(), v);
  return t;
}

std::vector<double>& Tensor::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return *data_;
}

double Tensor::item() const {
  if (size() != 1)
    throw ContractError(msg("item() on tensor of shape ", shape_str(shape_)));
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  return (*data_)[static_cast<size_t>(row_major_offset(shape_, idx))];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.node_ = -1;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

const Tensor& GradStore::at(const Tensor& t) const {
  if (t.node() < 0) throw ContractError("gradient requested for a constant tensor");
  return at_node(t.node());
}

const Tensor& GradStore::at_node(int node) const {
  auto it = grads_.find(node);
  if (it == grads_.end())
    throw ContractError(msg("node ", node, " is not a leaf of this tape"));
  return it->second;
}

Tape::Tape() {
  static std::atomic<uint64_t> next_id{1};
  id_ = next_id.fetch_add(1);
  if (g_active_tape)
    throw StateError("a gradient tape is already active on this thread");
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() noexcept { return g_active_tape; }

int Tape::watch(Tensor& t) {
  if (consumed_) throw StateError("tape already consumed by backward");
  nodes_.push_back(Node{t.shape(), true, nullptr});
  int id = static_cast<int>(nodes_.size()) - 1;
  t.set_node(id);
  return id;
}

int Tape::record(Shape out_shape, PullFn pull) {
  if (consumed_) throw StateError("tape already consumed by backward");
  nodes_.push_back(Node{std::move(out_shape), false, std::move(pull)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, const Tensor& g) {
  if (!in_backward_) throw StateError("accumulate outside of backward");
  if (node < 0) return;
  auto& slot = nodes_.at(static_cast<size_t>(node));
  if (g.shape() != slot.shape)
    throw ConformanceError(msg("gradient shape ", shape_str(g.shape()),
                               " does not match node shape ", shape_str(slot.shape)));
  if (!has_grad_[static_cast<size_t>(node)]) {
    grads_[static_cast<size_t>(node)] = g;
    has_grad_[static_cast<size_t>(node)] = 1;
  } else {
    auto& acc = grads_[static_cast<size_t>(node)].mutable_data();
    const auto& add = g.data();
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += add[i];
  }
}

GradStore Tape::backward(const Tensor& loss) {
  if (consumed_) throw StateError("tape already consumed by backward");
  if (loss.size() != 1)
    throw ContractError(msg("backward requires a scalar loss, got shape ",
                            shape_str(loss.shape())));
  if (loss.node() < 0)
    throw ContractError("loss does not depend on any watched tensor");

  grads_.assign(nodes_.size(), Tensor());
  has_grad_.assign(nodes_.size(), 0);
  grads_[static_cast<size_t>(loss.node())] = Tensor::filled(loss.shape(), 1.0);
  has_grad_[static_cast<size_t>(loss.node())] = 1;

  in_backward_ = true;
  Tape* saved = g_active_tape;
  g_active_tape = nullptr;
  for (int i = loss.node(); i >= 0; --i) {
    if (!has_grad_[static_cast<size_t>(i)]) continue;
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.pull) n.pull(*this, grads_[static_cast<size_t>(i)]);
  }
  g_active_tape = saved;
  in_backward_ = false;

  GradStore store;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].leaf) continue;
    store.grads_.emplace(static_cast<int>(i), has_grad_[i] ? std::move(grads_[i])
                                                           : Tensor(nodes_[i].shape));
  }
  nodes_.clear();
  grads_.clear();
  has_grad_.clear();
  consumed_ = true;
  return store;
}

// ---------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------

namespace detail {

Tensor mm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ConformanceError(msg("matmul needs rank-2 operands, got ", shape_str(a.shape()),
                               " and ", shape_str(b.shape())));
  const int m = trans_a ? a.extent(1) : a.extent(0);
  const int k = trans_a ? a.extent(0) : a.extent(1);
  const int kb = trans_b ? b.extent(1) : b.extent(0);
  const int n = trans_b ? b.extent(0) : b.extent(1);
  if (k != kb)
    throw ConformanceError(msg("matmul inner extents differ: ", shape_str(a.shape()), " x ",
                               shape_str(b.shape())));
  Tensor out(Shape{m, n});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.mutable_data().data();
  if (!trans_a && !trans_b) {
    for (int i = 0; i < m; ++i) {
      const double* Ai = A + static_cast<int64_t>(i) * k;
      double* Ci = C + static_cast<int64_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        const double av = Ai[kk];
        if (av == 0.0) continue;
        const double* Bk = B + static_cast<int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) Ci[j] += av * Bk[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (int i = 0; i < m; ++i) {
      const double* Ai = A + static_cast<int64_t>(i) * k;
      double* Ci = C + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* Bj = B + static_cast<int64_t>(j) * k;
        double acc = 0.0;
        for (int kk = 0; kk < k; ++kk) acc += Ai[kk] * Bj[kk];
        Ci[j] = acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (int kk = 0; kk < k; ++kk) {
      const double* Ak = A + static_cast<int64_t>(kk) * m;
      const double* Bk = B + static_cast<int64_t>(kk) * n;
      for (int i = 0; i < m; ++i) {
        const double av = Ak[i];
        if (av == 0.0) continue;
        double* Ci = C + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) Ci[j] += av * Bk[j];
      }
    }
  } else {
    throw ContractError("mm: double-transposed product is not used");
  }
  return out;
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out = detail::mm(a, b, false, false);
  if (Tape* tape = recording_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    Tensor av = a.detached(), bv = b.detached();
    out.set_node(tape->record(out.shape(), [na, nb, av, bv](Tape& t, const Tensor& g) {
      if (na >= 0) t.accumulate(na, detail::mm(g, bv, false, true));
      if (nb >= 0) t.accumulate(nb, detail::mm(av, g, true, false));
    }));
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = b.rank() == 1 && a.rank() > 1 && a.shape().back() == b.extent(0);
  if (!bias) check_same_shape("add", a, b);
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  const auto& bv = b.data();
  if (bias) {
    const size_t n = bv.size();
    for (size_t i = 0; i < o.size(); ++i) o[i] += bv[i % n];
  } else {
    for (size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  }
  if (Tape* tape = recording_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    Shape bshape = b.shape();
    out.set_node(tape->record(out.shape(), [na, nb, bias, bshape](Tape& t, const Tensor& g) {
      if (na >= 0) t.accumulate(na, g);
      if (nb < 0) return;
      if (!bias) {
        t.accumulate(nb, g);
        return;
      }
      Tensor gb(bshape);
      auto& gd = gb.mutable_data();
      const auto& gv = g.data();
      const size_t n = gd.size();
      for (size_t i = 0; i < gv.size(); ++i) gd[i % n] += gv[i];
      t.accumulate(nb, gb);
    }));
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  const auto& bv = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  if (Tape* tape = recording_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    out.set_node(tape->record(out.shape(), [na, nb](Tape& t, const Tensor& g) {
      if (na >= 0) t.accumulate(na, g);
      if (nb >= 0) t.accumulate(nb, scale(g, -1.0));
    }));
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  const auto& bv = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  if (Tape* tape = recording_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    Tensor av = a.detached(), bvt = b.detached();
    out.set_node(tape->record(out.shape(), [na, nb, av, bvt](Tape& t, const Tensor& g) {
      if (na >= 0) t.accumulate(na, mul(g, bvt));
      if (nb >= 0) t.accumulate(nb, mul(g, av));
    }));
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  const auto& bv = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] /= bv[i];
  if (Tape* tape = recording_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    Tensor bvt = b.detached(), ov = out.detached();
    out.set_node(tape->record(out.shape(), [na, nb, bvt, ov](Tape& t, const Tensor& g) {
      if (na >= 0) t.accumulate(na, div(g, bvt));
      if (nb >= 0) t.accumulate(nb, scale(mul(g, div(ov, bvt)), -1.0));
    }));
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a.detached();
  for (double& v : out.mutable_data()) v *= s;
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    out.set_node(tape->record(out.shape(), [na, s](Tape& t, const Tensor& g) {
      t.accumulate(na, scale(g, s));
    }));
  }
  return out;
}

namespace {

// Shared plumbing for elementwise maps with a value-based derivative.
template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = a.detached();
  for (double& v : out.mutable_data()) v = fwd(v);
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Tensor av = a.detached(), ov = out.detached();
    out.set_node(tape->record(out.shape(), [na, av, ov, bwd](Tape& t, const Tensor& g) {
      Tensor gx = g.detached();
      auto& gd = gx.mutable_data();
      const auto& x = av.data();
      const auto& y = ov.data();
      for (size_t i = 0; i < gd.size(); ++i) gd[i] *= bwd(x[i], y[i]);
      t.accumulate(na, gx);
    }));
  }
  return out;
}

}  // namespace

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data())
    if (!(v > 0.0)) throw NumericError(msg("log of non-positive value ", v));
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data())
    if (v < 0.0) throw NumericError(msg("sqrt of negative value ", v));
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& a) {
  return unary_op(a, [](double x) { return std::abs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw ConformanceError(msg("transpose needs a rank-2 tensor, got ", shape_str(a.shape())));
  const int m = a.extent(0), n = a.extent(1);
  Tensor out(Shape{n, m});
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      dst[static_cast<int64_t>(j) * m + i] = src[static_cast<int64_t>(i) * n + j];
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    out.set_node(tape->record(out.shape(), [na](Tape& t, const Tensor& g) {
      t.accumulate(na, transpose(g));
    }));
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ConformanceError(msg("reshape ", shape_str(a.shape()), " -> ", shape_str(shape),
                               " changes element count"));
  Tensor out(std::move(shape), a.data());
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Shape orig = a.shape();
    out.set_node(tape->record(out.shape(), [na, orig](Tape& t, const Tensor& g) {
      t.accumulate(na, reshape(g, orig));
    }));
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ConformanceError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank)
    throw ConformanceError(msg("concat axis ", axis, " out of range for rank ", rank));
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank)
      throw ConformanceError("concat operands differ in rank");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.shape()[static_cast<size_t>(d)] != first[static_cast<size_t>(d)])
        throw ConformanceError(msg("concat operand shape ", shape_str(p.shape()),
                                   " incompatible with ", shape_str(first), " on axis ", axis));
    total += p.extent(axis);
  }
  Shape out_shape = first;
  out_shape[static_cast<size_t>(axis)] = total;

  // Row-major copy: an [outer, extent(axis), inner] view of every operand.
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= first[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= first[static_cast<size_t>(d)];

  Tensor out(out_shape);
  double* dst = out.mutable_data().data();
  const int64_t out_stride = static_cast<int64_t>(total) * inner;
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t p_stride = static_cast<int64_t>(p.extent(axis)) * inner;
    const double* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * p_stride, src + (o + 1) * p_stride, dst + o * out_stride + off);
    off += p_stride;
  }

  bool tracked = false;
  for (const Tensor& p : parts)
    if (p.node() >= 0) tracked = true;
  if (tracked && Tape::active()) {
    std::vector<int> ids;
    std::vector<int> extents;
    for (const Tensor& p : parts) {
      ids.push_back(p.node());
      extents.push_back(p.extent(axis));
    }
    out.set_node(Tape::active()->record(out.shape(),
        [ids, extents, axis](Tape& t, const Tensor& g) {
          int start = 0;
          for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= 0) t.accumulate(ids[i], narrow(g, axis, start, extents[i]));
            start += extents[i];
          }
        }));
  }
  return out;
}

Tensor narrow(const Tensor& a, int axis, int start, int len) {
  const int rank = a.rank();
  if (axis < 0 || axis >= rank)
    throw ConformanceError(msg("narrow axis ", axis, " out of range for rank ", rank));
  if (start < 0 || len < 0 || start + len > a.extent(axis))
    throw ConformanceError(msg("narrow [", start, ",", start + len, ") exceeds extent ",
                               a.extent(axis), " on axis ", axis));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.extent(d);
  for (int d = axis + 1; d < rank; ++d) inner *= a.extent(d);

  Tensor out(out_shape);
  const int64_t src_stride = static_cast<int64_t>(a.extent(axis)) * inner;
  const int64_t dst_stride = static_cast<int64_t>(len) * inner;
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(src + o * src_stride + static_cast<int64_t>(start) * inner,
              src + o * src_stride + static_cast<int64_t>(start + len) * inner,
              dst + o * dst_stride);

  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Shape orig = a.shape();
    out.set_node(tape->record(out.shape(),
        [na, orig, axis, start, len, outer, inner](Tape& t, const Tensor& g) {
          Tensor ga(orig);
          const int64_t full = static_cast<int64_t>(orig[static_cast<size_t>(axis)]) * inner;
          const int64_t part = static_cast<int64_t>(len) * inner;
          double* dstg = ga.mutable_data().data();
          const double* srcg = g.data().data();
          for (int64_t o = 0; o < outer; ++o)
            std::copy(srcg + o * part, srcg + (o + 1) * part,
                      dstg + o * full + static_cast<int64_t>(start) * inner);
          t.accumulate(na, ga);
        }));
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& rows) {
  if (a.rank() < 1)
    throw ConformanceError("gather_rows on a scalar");
  const int n_rows = a.extent(0);
  for (int r : rows)
    if (r < 0 || r >= n_rows)
      throw ConformanceError(msg("row index ", r, " out of range [0,", n_rows, ")"));
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<int>(rows.size());
  const int64_t stride = a.rank() > 1 ? a.size() / n_rows : 1;

  Tensor out(out_shape);
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(src + rows[i] * stride, src + (rows[i] + 1) * stride,
              dst + static_cast<int64_t>(i) * stride);

  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Shape orig = a.shape();
    out.set_node(tape->record(out.shape(), [na, orig, rows, stride](Tape& t, const Tensor& g) {
      Tensor ga(orig);
      double* dstg = ga.mutable_data().data();
      const double* srcg = g.data().data();
      for (size_t i = 0; i < rows.size(); ++i) {
        double* row = dstg + rows[i] * stride;
        const double* grow = srcg + static_cast<int64_t>(i) * stride;
        for (int64_t j = 0; j < stride; ++j) row[j] += grow[j];
      }
      t.accumulate(na, ga);
    }));
  }
  return out;
}

Tensor pick(const Tensor& a, const std::vector<int>& cols) {
  if (a.rank() != 2)
    throw ConformanceError(msg("pick needs a rank-2 tensor, got ", shape_str(a.shape())));
  const int m = a.extent(0), n = a.extent(1);
  if (static_cast<int>(cols.size()) != m)
    throw ConformanceError(msg("pick got ", cols.size(), " column indices for ", m, " rows"));
  for (int c : cols)
    if (c < 0 || c >= n)
      throw ConformanceError(msg("column index ", c, " out of range [0,", n, ")"));
  Tensor out(Shape{m});
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for (int i = 0; i < m; ++i) dst[i] = src[static_cast<int64_t>(i) * n + cols[i]];
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Shape orig = a.shape();
    out.set_node(tape->record(out.shape(), [na, orig, cols, n](Tape& t, const Tensor& g) {
      Tensor ga(orig);
      double* dstg = ga.mutable_data().data();
      const double* srcg = g.data().data();
      for (size_t i = 0; i < cols.size(); ++i)
        dstg[static_cast<int64_t>(i) * n + cols[i]] = srcg[i];
      t.accumulate(na, ga);
    }));
  }
  return out;
}

namespace {

struct LastAxisView {
  int64_t rows;
  int n;
};

LastAxisView last_axis(const char* op, const Tensor& a) {
  if (a.rank() < 1)
    throw ConformanceError(msg(op, " needs rank >= 1, got a scalar"));
  const int n = a.shape().back();
  if (n == 0) throw ConformanceError(msg(op, " over an empty axis"));
  return {a.size() / n, n};
}

}  // namespace

Tensor softmax(const Tensor& a) {
  if (!a.all_finite()) throw NumericError("softmax input is not finite");
  const auto [rows, n] = last_axis("softmax", a);
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    double* row = o.data() + r * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= sum;
  }
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Tensor y = out.detached();
    const int width = n;
    const int64_t nrows = rows;
    out.set_node(tape->record(out.shape(), [na, y, width, nrows](Tape& t, const Tensor& g) {
      Tensor gx = g.detached();
      auto& gd = gx.mutable_data();
      const auto& yv = y.data();
      for (int64_t r = 0; r < nrows; ++r) {
        double* grow = gd.data() + r * width;
        const double* yrow = yv.data() + r * width;
        double dot = 0.0;
        for (int j = 0; j < width; ++j) dot += grow[j] * yrow[j];
        for (int j = 0; j < width; ++j) grow[j] = yrow[j] * (grow[j] - dot);
      }
      t.accumulate(na, gx);
    }));
  }
  return out;
}

Tensor log_softmax(const Tensor& a) {
  if (!a.all_finite()) throw NumericError("log_softmax input is not finite");
  const auto [rows, n] = last_axis("log_softmax", a);
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    double* row = o.data() + r * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) row[j] -= lse;
  }
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Tensor y = out.detached();
    const int width = n;
    const int64_t nrows = rows;
    out.set_node(tape->record(out.shape(), [na, y, width, nrows](Tape& t, const Tensor& g) {
      Tensor gx = g.detached();
      auto& gd = gx.mutable_data();
      const auto& yv = y.data();
      for (int64_t r = 0; r < nrows; ++r) {
        double* grow = gd.data() + r * width;
        const double* yrow = yv.data() + r * width;
        double gsum = 0.0;
        for (int j = 0; j < width; ++j) gsum += grow[j];
        for (int j = 0; j < width; ++j) grow[j] -= std::exp(yrow[j]) * gsum;
      }
      t.accumulate(na, gx);
    }));
  }
  return out;
}

Tensor masked_fill(const Tensor& a, const Tensor& mask, double value) {
  check_same_shape("masked_fill", a, mask);
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  const auto& m = mask.data();
  for (size_t i = 0; i < o.size(); ++i)
    if (m[i] != 0.0) o[i] = value;
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Tensor mv = mask.detached();
    out.set_node(tape->record(out.shape(), [na, mv](Tape& t, const Tensor& g) {
      Tensor gx = g.detached();
      auto& gd = gx.mutable_data();
      const auto& m = mv.data();
      for (size_t i = 0; i < gd.size(); ++i)
        if (m[i] != 0.0) gd[i] = 0.0;
      t.accumulate(na, gx);
    }));
  }
  return out;
}

namespace {

struct AxisView {
  int64_t outer;
  int extent;
  int64_t inner;
  Shape out_shape;
};

AxisView axis_view(const char* op, const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank())
    throw ConformanceError(msg(op, " axis ", axis, " out of range for rank ", a.rank()));
  AxisView v{1, a.extent(axis), 1, a.shape()};
  for (int d = 0; d < axis; ++d) v.outer *= a.extent(d);
  for (int d = axis + 1; d < a.rank(); ++d) v.inner *= a.extent(d);
  v.out_shape.erase(v.out_shape.begin() + axis);
  return v;
}

}  // namespace

Tensor sum(const Tensor& a, int axis) {
  const AxisView v = axis_view("sum", a, axis);
  Tensor out(v.out_shape);
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t o = 0; o < v.outer; ++o)
    for (int e = 0; e < v.extent; ++e) {
      const double* s = src + (o * v.extent + e) * v.inner;
      double* d = dst + o * v.inner;
      for (int64_t i = 0; i < v.inner; ++i) d[i] += s[i];
    }
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Shape orig = a.shape();
    out.set_node(tape->record(out.shape(), [na, orig, v](Tape& t, const Tensor& g) {
      Tensor ga(orig);
      double* dstg = ga.mutable_data().data();
      const double* srcg = g.data().data();
      for (int64_t o = 0; o < v.outer; ++o)
        for (int e = 0; e < v.extent; ++e)
          std::copy(srcg + o * v.inner, srcg + (o + 1) * v.inner,
                    dstg + (o * v.extent + e) * v.inner);
      t.accumulate(na, ga);
    }));
  }
  return out;
}

Tensor mean(const Tensor& a, int axis) {
  const AxisView v = axis_view("mean", a, axis);
  if (v.extent == 0) throw ConformanceError("mean over an empty axis");
  return scale(sum(a, axis), 1.0 / v.extent);
}

Tensor max(const Tensor& a, int axis) {
  const AxisView v = axis_view("max", a, axis);
  if (v.extent == 0) throw ConformanceError("max over an empty axis");
  Tensor out(v.out_shape);
  std::vector<int> arg(static_cast<size_t>(v.outer * v.inner), 0);
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t i = 0; i < v.inner; ++i) {
      double best = src[o * v.extent * v.inner + i];
      int best_e = 0;
      for (int e = 1; e < v.extent; ++e) {
        const double cand = src[(o * v.extent + e) * v.inner + i];
        if (cand > best) {
          best = cand;
          best_e = e;
        }
      }
      dst[o * v.inner + i] = best;
      arg[static_cast<size_t>(o * v.inner + i)] = best_e;
    }
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Shape orig = a.shape();
    out.set_node(tape->record(out.shape(), [na, orig, v, arg](Tape& t, const Tensor& g) {
      Tensor ga(orig);
      double* dstg = ga.mutable_data().data();
      const double* srcg = g.data().data();
      for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t i = 0; i < v.inner; ++i) {
          const int e = arg[static_cast<size_t>(o * v.inner + i)];
          dstg[(o * v.extent + e) * v.inner + i] = srcg[o * v.inner + i];
        }
      t.accumulate(na, ga);
    }));
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  Tensor out = Tensor::scalar(acc);
  if (Tape* tape = recording_tape({&a})) {
    int na = a.node();
    Shape orig = a.shape();
    out.set_node(tape->record(out.shape(), [na, orig](Tape& t, const Tensor& g) {
      t.accumulate(na, Tensor::filled(orig, g.item()));
    }));
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  if (a.size() == 0) throw ConformanceError("mean_all of an empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

}  // namespace tmt
