#include "tmt/transformer.hpp"

namespace tmt {

namespace {

std::string layer_prefix(const std::string& prefix, int layer) {
  return prefix + ".l" + std::to_string(layer);
}

Tensor sublayer(const ParamStore& store, const std::string& norm_prefix, const Tensor& x,
                const Tensor& out, const Forward& fw) {
  return layer_norm(store, norm_prefix, add(x, apply_dropout(out, fw)));
}

}  // namespace

void add_encoder(ParamStore& store, const std::string& prefix, const StackConfig& cfg,
                 Rng& rng) {
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    add_multi_head(store, lp + ".self", cfg.d, rng);
    add_layer_norm(store, lp + ".norm1", cfg.d);
    add_ffn(store, lp + ".ffn", cfg.d, cfg.d_ff, rng);
    add_layer_norm(store, lp + ".norm2", cfg.d);
  }
}

Tensor encode(const ParamStore& store, const std::string& prefix, const StackConfig& cfg,
              const Tensor& source, const Tensor& pad, const Forward& fw) {
  if (source.rank() != 2)
    throw ConformanceError(msg("encoder input must be rank-2, got ", shape_str(source.shape())));
  if (source.extent(0) == 0) throw ContractError("encoder input is empty");
  Tensor x = source;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    Tensor a = multi_head_attention(store, lp + ".self", x, x, cfg.heads, pad, fw);
    x = sublayer(store, lp + ".norm1", x, a, fw);
    Tensor f = ffn(store, lp + ".ffn", x);
    x = sublayer(store, lp + ".norm2", x, f, fw);
  }
  return x;
}

void add_decoder(ParamStore& store, const std::string& prefix, const StackConfig& cfg,
                 const std::vector<std::string>& memory_names, Rng& rng) {
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    add_multi_head(store, lp + ".self", cfg.d, rng);
    add_layer_norm(store, lp + ".norm_self", cfg.d);
    for (const std::string& m : memory_names) {
      add_multi_head(store, lp + ".mem." + m, cfg.d, rng);
      add_layer_norm(store, lp + ".norm_mem." + m, cfg.d);
    }
    add_ffn(store, lp + ".ffn", cfg.d, cfg.d_ff, rng);
    add_layer_norm(store, lp + ".norm_ffn", cfg.d);
  }
}

Tensor decode(const ParamStore& store, const std::string& prefix, const StackConfig& cfg,
              const Tensor& target_in, const std::vector<Memory>& memories,
              const Tensor& self_mask, const Forward& fw) {
  if (target_in.rank() != 2)
    throw ConformanceError(msg("decoder input must be rank-2, got ",
                               shape_str(target_in.shape())));
  bool any_memory = false;
  for (const Memory& m : memories)
    if (m.seq.size() > 0) any_memory = true;
  if (!any_memory) throw ContractError("decoder has no nonempty memory");
  for (const Memory& m : memories)
    if (m.seq.size() > 0 && (m.seq.rank() != 2 || m.seq.extent(1) != cfg.d))
      throw ConformanceError(msg("memory ", m.name, " has shape ", shape_str(m.seq.shape()),
                                 " but the stack width is ", cfg.d));

  Tensor x = target_in;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    Tensor a = multi_head_attention(store, lp + ".self", x, x, cfg.heads, self_mask, fw);
    x = sublayer(store, lp + ".norm_self", x, a, fw);
    for (const Memory& m : memories) {
      if (m.seq.size() == 0) continue;
      Tensor c = multi_head_attention(store, lp + ".mem." + m.name, x, m.seq, cfg.heads,
                                      m.mask, fw);
      x = sublayer(store, lp + ".norm_mem." + m.name, x, c, fw);
    }
    Tensor f = ffn(store, lp + ".ffn", x);
    x = sublayer(store, lp + ".norm_ffn", x, f, fw);
  }
  return x;
}

}  // namespace tmt
