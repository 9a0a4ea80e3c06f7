#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "tmt/rng.hpp"
#include "tmt/tensor.hpp"

namespace tmt {

/// Additive attention-mask value for blocked positions.
inline constexpr double kMaskBlock = -1e9;
/// Variance floor for layer normalization.
inline constexpr double kLayerNormEps = 1e-6;

/// Named parameter tensors under unique dotted paths. `use` hands out a
/// tape-tracked view: the first use of a name on a given tape watches it,
/// later uses share the node so gradients accumulate across call sites.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Tensor& raw(const std::string& name);
  const Tensor& raw(const std::string& name) const;
  Tensor use(const std::string& name) const;

  std::vector<std::string> names() const;
  size_t size() const { return params_.size(); }
  int64_t total_elements() const;
  /// Node id this name received on the most recent tape, -1 if unused.
  int cached_node(const std::string& name) const;

 private:
  std::map<std::string, Tensor> params_;
  mutable std::unordered_map<std::string, int> node_cache_;
  mutable uint64_t cache_tape_id_ = 0;
};

/// Per-call forward context: training flag plus the dropout regime.
struct Forward {
  bool training = false;
  double keep_prob = 1.0;
  Rng* rng = nullptr;
};

/// Inverted dropout: identity when not training or keep_prob is 1.
Tensor dropout(const Tensor& x, double keep_prob, bool training, Rng* rng);
inline Tensor apply_dropout(const Tensor& x, const Forward& fw) {
  return dropout(x, fw.keep_prob, fw.training, fw.rng);
}

// Initialization: uniform Xavier for weights, zeros for biases/shifts,
// ones for gains.
Tensor xavier_uniform(int fan_in, int fan_out, Shape shape, Rng& rng);

// Affine map over the trailing axis; parameters "<prefix>.w" [in,out]
// and "<prefix>.b" [out].
void add_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng);
Tensor linear(const ParamStore& store, const std::string& prefix, const Tensor& x);

// Per-position normalization over the trailing axis with learned gain and
// shift ("<prefix>.g", "<prefix>.s").
void add_layer_norm(ParamStore& store, const std::string& prefix, int d);
Tensor layer_norm(const ParamStore& store, const std::string& prefix, const Tensor& x);
/// Functional form used by the registered variant and by tests.
Tensor layer_norm_fused(const Tensor& x, const Tensor& gain, const Tensor& shift,
                        double eps = kLayerNormEps);

/// Row lookup into a [V, d] table, scaled by sqrt(d) when requested.
/// Out-of-range ids raise VocabError naming the offending position.
Tensor embed(const ParamStore& store, const std::string& table, const std::vector<int>& ids,
             bool scale_by_sqrt_d);

/// Sinusoidal position table: (pos, 2i) = sin(pos/10000^(2i/d)),
/// (pos, 2i+1) = cos of the same argument. Width must be even.
Tensor positional_encoding(int length, int width);

/// softmax(q kᵀ / sqrt(d_k) + mask) v with an additive mask of 0 (allowed)
/// or kMaskBlock (blocked); fully blocked rows output zeros. Attention
/// weights are dropped out under `fw` when training.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask, const Forward& fw);

// Multi-head attention: per-head slices of shared q/k/v projections,
// concatenated and output-projected. Residual and norm belong to the
// caller. Parameters "<prefix>.{q,k,v,o}.{w,b}".
void add_multi_head(ParamStore& store, const std::string& prefix, int d, Rng& rng);
Tensor multi_head_attention(const ParamStore& store, const std::string& prefix,
                            const Tensor& x_q, const Tensor& x_kv, int heads,
                            const Tensor& mask, const Forward& fw);

// Position-wise feed-forward: linear(d -> d_ff), relu, linear(d_ff -> d).
void add_ffn(ParamStore& store, const std::string& prefix, int d, int d_ff, Rng& rng);
Tensor ffn(const ParamStore& store, const std::string& prefix, const Tensor& x);

/// [t, t] additive mask blocking positions j > i.
Tensor causal_mask(int t);
/// [q_len, kv_len] additive mask blocking key positions where keep is 0.
Tensor pad_mask(const std::vector<char>& keep, int q_len);
/// Elementwise sum of two additive masks of equal shape; either may be
/// empty (size 0), in which case the other is returned.
Tensor combine_masks(const Tensor& a, const Tensor& b);

}  // namespace tmt
