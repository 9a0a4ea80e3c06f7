#pragma once

#include <string>
#include <vector>

#include "tmt/transformer.hpp"

namespace tmt {

enum class TargetKind { text, dense };
enum class DenseLossKind { l1, similarity };

/// Geometry and target family of one modal translator. Both halves share
/// the depth. Text targets are embedded from (and projected back through)
/// a shared table owned by the surrounding model.
struct TmtConfig {
  int depth = 2;
  int d = 128;
  int heads = 4;
  int d_ff = 512;
  TargetKind target_kind = TargetKind::text;
  DenseLossKind dense_loss = DenseLossKind::l1;
  std::string embed_table;
  int sos_id = 2;
  bool scale_embed = true;

  StackConfig stack() const { return {depth, d, heads, d_ff}; }
};

/// Exactly one of the two pointers is set, matching the configured target
/// kind; both null means no supervision (inference).
struct TmtTarget {
  const std::vector<int>* tokens = nullptr;
  const Tensor* dense = nullptr;
};

struct TmtOutput {
  Tensor enhanced_source;  // [T, d], the encoder half's output
  Tensor translation;      // [N, V] logits or [N, d] dense prediction
  Tensor loss;             // scalar, set when a target was supplied
  bool has_loss = false;
};

void add_tmt(ParamStore& store, const std::string& prefix, const TmtConfig& cfg, Rng& rng);

/// Encodes the source; when a target is present, teacher-forces the
/// decoder half on the shifted-right target with the encoded source as
/// memory and computes the loss for the configured target kind. The
/// enhanced source never depends on the target.
TmtOutput tmt_forward(const ParamStore& store, const std::string& prefix, const TmtConfig& cfg,
                      const Tensor& source, const TmtTarget& target, const Forward& fw);

/// Mean token negative log-likelihood of `targets` under `logits` over
/// positions where `keep` is nonzero (all positions when keep is null).
Tensor text_target_loss(const Tensor& logits, const std::vector<int>& targets,
                        const std::vector<char>* keep = nullptr);

/// L1: mean absolute difference. Similarity: mean over positions of
/// 1 - cosine, where a zero vector on either side makes the cosine 0.
Tensor dense_target_loss(const Tensor& prediction, const Tensor& target, DenseLossKind kind);

}  // namespace tmt
