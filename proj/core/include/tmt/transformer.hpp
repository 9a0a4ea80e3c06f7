#pragma once

#include <string>
#include <vector>

#include "tmt/nn.hpp"

namespace tmt {

/// Geometry shared by encoder and decoder stacks.
struct StackConfig {
  int depth = 1;
  int d = 128;
  int heads = 4;
  int d_ff = 512;
};

/// One cross-attention target for a decoder layer. An empty sequence
/// (zero rows) is skipped; an empty mask means no masking.
struct Memory {
  std::string name;
  Tensor seq;
  Tensor mask;
};

// Post-norm encoder: per layer, self-attention and feed-forward sublayers,
// each wrapped in residual + layer norm, with dropout on sublayer outputs.
// Parameters "<prefix>.l<i>.{self.*, norm1.*, ffn.*, norm2.*}".
void add_encoder(ParamStore& store, const std::string& prefix, const StackConfig& cfg,
                 Rng& rng);
Tensor encode(const ParamStore& store, const std::string& prefix, const StackConfig& cfg,
              const Tensor& source, const Tensor& pad, const Forward& fw);

// Post-norm decoder with causally masked self-attention and one
// cross-attention sublayer per named memory, in the given order.
// Parameters "<prefix>.l<i>.{self.*, norm_self.*, mem.<name>.*,
// norm_mem.<name>.*, ffn.*, norm_ffn.*}".
void add_decoder(ParamStore& store, const std::string& prefix, const StackConfig& cfg,
                 const std::vector<std::string>& memory_names, Rng& rng);
Tensor decode(const ParamStore& store, const std::string& prefix, const StackConfig& cfg,
              const Tensor& target_in, const std::vector<Memory>& memories,
              const Tensor& self_mask, const Forward& fw);

}  // namespace tmt
