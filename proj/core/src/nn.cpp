#include "tmt/nn.hpp"

#include <cmath>

namespace tmt {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  auto [it, inserted] = params_.emplace(name, std::move(init));
  if (!inserted) throw ContractError(msg("parameter ", name, " registered twice"));
  it->second.set_node(-1);
  return it->second;
}

Tensor& ParamStore::raw(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError(msg("unknown parameter ", name));
  return it->second;
}

const Tensor& ParamStore::raw(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError(msg("unknown parameter ", name));
  return it->second;
}

Tensor ParamStore::use(const std::string& name) const {
  const Tensor& stored = raw(name);
  Tape* tape = Tape::active();
  if (!tape) return stored.detached();
  if (cache_tape_id_ != tape->id()) {
    node_cache_.clear();
    cache_tape_id_ = tape->id();
  }
  Tensor view = stored.detached();
  auto it = node_cache_.find(name);
  if (it != node_cache_.end()) {
    view.set_node(it->second);
  } else {
    tape->watch(view);
    node_cache_.emplace(name, view.node());
  }
  return view;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(name);
  return out;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

int ParamStore::cached_node(const std::string& name) const {
  auto it = node_cache_.find(name);
  return it == node_cache_.end() ? -1 : it->second;
}

Tensor dropout(const Tensor& x, double keep_prob, bool training, Rng* rng) {
  if (keep_prob <= 0.0 || keep_prob > 1.0)
    throw ConfigError(msg("dropout keep probability ", keep_prob, " outside (0, 1]"));
  if (!training || keep_prob == 1.0) return x;
  if (!rng) throw ContractError("dropout requires an rng source in training mode");
  Tensor mask(x.shape());
  const double kept = 1.0 / keep_prob;
  for (double& m : mask.mutable_data()) m = rng->bernoulli(keep_prob) ? kept : 0.0;
  return mul(x, mask);
}

Tensor xavier_uniform(int fan_in, int fan_out, Shape shape, Rng& rng) {
  const double limit = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(-limit, limit);
  return t;
}

void add_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng) {
  store.add(prefix + ".w", xavier_uniform(in, out, Shape{in, out}, rng));
  store.add(prefix + ".b", Tensor(Shape{out}));
}

Tensor linear(const ParamStore& store, const std::string& prefix, const Tensor& x) {
  Tensor w = store.use(prefix + ".w");
  Tensor b = store.use(prefix + ".b");
  if (x.rank() == 2) return add(matmul(x, w), b);
  if (x.rank() < 2)
    throw ConformanceError(msg("linear needs rank >= 2 input, got ", shape_str(x.shape())));
  const int in = x.shape().back();
  Tensor flat = reshape(x, Shape{static_cast<int>(x.size() / std::max<int64_t>(1, in)), in});
  Tensor y = add(matmul(flat, w), b);
  Shape out_shape = x.shape();
  out_shape.back() = w.extent(1);
  return reshape(y, out_shape);
}

void add_layer_norm(ParamStore& store, const std::string& prefix, int d) {
  store.add(prefix + ".g", Tensor::filled(Shape{d}, 1.0));
  store.add(prefix + ".s", Tensor(Shape{d}));
}

Tensor layer_norm(const ParamStore& store, const std::string& prefix, const Tensor& x) {
  return layer_norm_fused(x, store.use(prefix + ".g"), store.use(prefix + ".s"));
}

Tensor layer_norm_fused(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  if (x.rank() < 1 || gain.rank() != 1 || shift.rank() != 1)
    throw ConformanceError(msg("layer_norm shapes ", shape_str(x.shape()), ", ",
                               shape_str(gain.shape()), ", ", shape_str(shift.shape())));
  const int d = x.shape().back();
  if (d < 2) throw ConformanceError(msg("layer_norm width ", d, " < 2"));
  if (gain.extent(0) != d || shift.extent(0) != d)
    throw ConformanceError(msg("layer_norm width ", d, " vs gain ", gain.extent(0),
                               " and shift ", shift.extent(0)));
  const int64_t rows = x.size() / d;

  Tensor xhat(x.shape());
  std::vector<double> inv(static_cast<size_t>(rows));
  Tensor out(x.shape());
  {
    const double* src = x.data().data();
    double* xh = xhat.mutable_data().data();
    double* o = out.mutable_data().data();
    const double* g = gain.data().data();
    const double* s = shift.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* row = src + r * d;
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += row[j];
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        const double c = row[j] - mean;
        var += c * c;
      }
      var /= d;
      const double iv = 1.0 / std::sqrt(var + eps);
      inv[static_cast<size_t>(r)] = iv;
      double* xhr = xh + r * d;
      double* orow = o + r * d;
      for (int j = 0; j < d; ++j) {
        xhr[j] = (row[j] - mean) * iv;
        orow[j] = g[j] * xhr[j] + s[j];
      }
    }
  }

  Tape* tape = Tape::active();
  const bool tracked = x.node() >= 0 || gain.node() >= 0 || shift.node() >= 0;
  if (tape && tracked) {
    const int nx = x.node(), ng = gain.node(), ns = shift.node();
    Tensor xh = xhat.detached();
    Tensor gv = gain.detached();
    Shape xshape = x.shape();
    out.set_node(tape->record(out.shape(),
        [nx, ng, ns, xh, gv, inv, xshape, d, rows](Tape& t, const Tensor& gout) {
          const double* dy = gout.data().data();
          const double* xhd = xh.data().data();
          const double* g = gv.data().data();
          if (ng >= 0 || ns >= 0) {
            Tensor dgain(Shape{d}), dshift(Shape{d});
            double* dg = dgain.mutable_data().data();
            double* ds = dshift.mutable_data().data();
            for (int64_t r = 0; r < rows; ++r)
              for (int j = 0; j < d; ++j) {
                dg[j] += dy[r * d + j] * xhd[r * d + j];
                ds[j] += dy[r * d + j];
              }
            if (ng >= 0) t.accumulate(ng, dgain);
            if (ns >= 0) t.accumulate(ns, dshift);
          }
          if (nx >= 0) {
            Tensor dx(xshape);
            double* dxd = dx.mutable_data().data();
            std::vector<double> a(static_cast<size_t>(d));
            for (int64_t r = 0; r < rows; ++r) {
              double a_mean = 0.0, ax_mean = 0.0;
              for (int j = 0; j < d; ++j) {
                a[static_cast<size_t>(j)] = dy[r * d + j] * g[j];
                a_mean += a[static_cast<size_t>(j)];
                ax_mean += a[static_cast<size_t>(j)] * xhd[r * d + j];
              }
              a_mean /= d;
              ax_mean /= d;
              const double iv = inv[static_cast<size_t>(r)];
              for (int j = 0; j < d; ++j)
                dxd[r * d + j] =
                    iv * (a[static_cast<size_t>(j)] - a_mean - xhd[r * d + j] * ax_mean);
            }
            t.accumulate(nx, dx);
          }
        }));
  }
  return out;
}

Tensor embed(const ParamStore& store, const std::string& table, const std::vector<int>& ids,
             bool scale_by_sqrt_d) {
  Tensor tbl = store.use(table);
  if (tbl.rank() != 2)
    throw ConformanceError(msg("embedding table ", table, " has shape ", shape_str(tbl.shape())));
  const int vocab = tbl.extent(0);
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= vocab)
      throw VocabError(msg("token id ", ids[i], " at position ", i,
                           " outside vocabulary of size ", vocab));
  Tensor rows = gather_rows(tbl, ids);
  if (!scale_by_sqrt_d) return rows;
  return scale(rows, std::sqrt(static_cast<double>(tbl.extent(1))));
}

Tensor positional_encoding(int length, int width) {
  if (width % 2 != 0) throw ConfigError(msg("positional encoding width ", width, " is odd"));
  if (length < 0) throw ConformanceError(msg("negative position count ", length));
  Tensor out(Shape{length, width});
  double* o = out.mutable_data().data();
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < width / 2; ++i) {
      const double arg = pos * std::exp(-std::log(10000.0) * (2.0 * i / width));
      o[static_cast<int64_t>(pos) * width + 2 * i] = std::sin(arg);
      o[static_cast<int64_t>(pos) * width + 2 * i + 1] = std::cos(arg);
    }
  return out;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask, const Forward& fw) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ConformanceError(msg("attention operands must be rank-2 sequences, got ",
                               shape_str(q.shape()), ", ", shape_str(k.shape()), ", ",
                               shape_str(v.shape())));
  if (k.extent(0) != v.extent(0))
    throw ConformanceError(msg("key length ", k.extent(0), " != value length ", v.extent(0)));
  if (q.extent(1) != k.extent(1))
    throw ConformanceError(msg("query width ", q.extent(1), " != key width ", k.extent(1)));
  const int d_k = q.extent(1);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
  if (mask.size() > 0) {
    if (mask.shape() != Shape{q.extent(0), k.extent(0)})
      throw ConformanceError(msg("mask shape ", shape_str(mask.shape()), " for scores ",
                                 shape_str(scores.shape())));
    scores = add(scores, mask.detached());
  }
  Tensor attn = softmax(scores);
  attn = apply_dropout(attn, fw);
  Tensor out = matmul(attn, v);

  // Rows whose every position is blocked are defined to output zeros.
  if (mask.size() > 0) {
    const int t_q = q.extent(0), t_k = k.extent(0);
    bool any_dead = false;
    std::vector<char> alive(static_cast<size_t>(t_q), 0);
    for (int i = 0; i < t_q; ++i) {
      for (int j = 0; j < t_k; ++j)
        if (mask.data()[static_cast<size_t>(i) * t_k + j] > kMaskBlock / 2.0) {
          alive[static_cast<size_t>(i)] = 1;
          break;
        }
      if (!alive[static_cast<size_t>(i)]) any_dead = true;
    }
    if (any_dead) {
      Tensor keep(Shape{t_q, v.extent(1)});
      double* kd = keep.mutable_data().data();
      for (int i = 0; i < t_q; ++i)
        if (alive[static_cast<size_t>(i)])
          for (int j = 0; j < v.extent(1); ++j) kd[static_cast<int64_t>(i) * v.extent(1) + j] = 1.0;
      out = mul(out, keep);
    }
  }
  return out;
}

void add_multi_head(ParamStore& store, const std::string& prefix, int d, Rng& rng) {
  add_linear(store, prefix + ".q", d, d, rng);
  // The key projection carries no bias: softmax is invariant to shifting a
  // whole score row by a constant, so a key bias can never receive gradient.
  store.add(prefix + ".k.w", xavier_uniform(d, d, Shape{d, d}, rng));
  add_linear(store, prefix + ".v", d, d, rng);
  add_linear(store, prefix + ".o", d, d, rng);
}

Tensor multi_head_attention(const ParamStore& store, const std::string& prefix,
                            const Tensor& x_q, const Tensor& x_kv, int heads,
                            const Tensor& mask, const Forward& fw) {
  if (x_q.rank() != 2 || x_kv.rank() != 2)
    throw ConformanceError(msg("attention inputs must be rank-2, got ", shape_str(x_q.shape()),
                               " and ", shape_str(x_kv.shape())));
  const int d = x_q.extent(1);
  if (heads < 1 || d % heads != 0)
    throw ConfigError(msg("width ", d, " not divisible by ", heads, " heads"));
  const int d_head = d / heads;
  Tensor q = linear(store, prefix + ".q", x_q);
  Tensor k = matmul(x_kv, store.use(prefix + ".k.w"));
  Tensor v = linear(store, prefix + ".v", x_kv);
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = narrow(q, 1, h * d_head, d_head);
    Tensor kh = narrow(k, 1, h * d_head, d_head);
    Tensor vh = narrow(v, 1, h * d_head, d_head);
    outs.push_back(scaled_dot_attention(qh, kh, vh, mask, fw));
  }
  Tensor merged = heads == 1 ? outs[0] : concat(outs, 1);
  return linear(store, prefix + ".o", merged);
}

void add_ffn(ParamStore& store, const std::string& prefix, int d, int d_ff, Rng& rng) {
  add_linear(store, prefix + ".1", d, d_ff, rng);
  add_linear(store, prefix + ".2", d_ff, d, rng);
}

Tensor ffn(const ParamStore& store, const std::string& prefix, const Tensor& x) {
  return linear(store, prefix + ".2", relu(linear(store, prefix + ".1", x)));
}

Tensor causal_mask(int t) {
  Tensor m(Shape{t, t});
  double* d = m.mutable_data().data();
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) d[static_cast<int64_t>(i) * t + j] = kMaskBlock;
  return m;
}

Tensor pad_mask(const std::vector<char>& keep, int q_len) {
  const int t_k = static_cast<int>(keep.size());
  Tensor m(Shape{q_len, t_k});
  double* d = m.mutable_data().data();
  for (int i = 0; i < q_len; ++i)
    for (int j = 0; j < t_k; ++j)
      if (!keep[static_cast<size_t>(j)]) d[static_cast<int64_t>(i) * t_k + j] = kMaskBlock;
  return m;
}

Tensor combine_masks(const Tensor& a, const Tensor& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.shape() != b.shape())
    throw ConformanceError(msg("mask shapes ", shape_str(a.shape()), " vs ",
                               shape_str(b.shape())));
  Tensor out = a.detached();
  auto& o = out.mutable_data();
  const auto& bd = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

}  // namespace tmt
