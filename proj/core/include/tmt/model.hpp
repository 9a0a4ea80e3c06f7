#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tmt/data.hpp"
#include "tmt/translator.hpp"

namespace tmt {

enum class TaskMode { text_only, video_text };
enum class Toggle { automatic, on, off };
enum class DecodeMode { greedy, beam };

/// Full-model hyperparameters. depth_m governs the video-caption
/// translator halves; depth_n the hierarchical history encoder, the
/// dialog-summary translator and the query-aware audio stack.
struct ModelConfig {
  int d = 128;
  int heads = 4;
  int d_ff = 512;
  int depth_m = 2;
  int depth_n = 1;
  int depth_answer = 3;
  int vocab = 0;
  int d_feat_video = 0;
  int d_feat_audio = 0;
  double keep_prob = 0.5;
  double alpha = 0.3;
  double beta = 0.8;
  TaskMode task = TaskMode::video_text;
  Toggle vct = Toggle::automatic;
  Toggle dst = Toggle::automatic;
  bool scale_embed = true;

  void validate() const;
  bool uses_video() const { return task == TaskMode::video_text; }
  bool uses_audio() const { return task == TaskMode::video_text; }
  bool vct_enabled() const;
  bool dst_enabled() const;
  StackConfig stack(int depth) const { return {depth, d, heads, d_ff}; }
};

/// Eq.-style weighted sum of the three branch losses; weights must be
/// nonnegative.
Tensor total_loss(const Tensor& l_ans, const Tensor& l_c, const Tensor& l_s, double alpha,
                  double beta);

/// One example's streams, unpadded. Feature pointers may be null in
/// text-only mode.
struct ExampleView {
  std::vector<int> question, answer, caption, summary;
  std::vector<std::vector<int>> history;
  const Tensor* video = nullptr;
  const Tensor* audio = nullptr;
};

struct ExampleLoss {
  Tensor total;  // scalar, tape-tracked
  double l_ans = 0.0;
  double l_c = 0.0, l_s = 0.0;
  bool has_l_c = false, has_l_s = false;
  double nll_sum = 0.0;  // answer branch, for perplexity pooling
  int64_t tokens = 0;
};

struct BatchLoss {
  Tensor total;  // mean of per-example totals
  double l_ans = 0.0;
  double l_c = 0.0, l_s = 0.0;  // means over examples that had the branch
  int l_c_count = 0, l_s_count = 0;
  double nll_sum = 0.0;
  int64_t tokens = 0;
};

struct GenResult {
  std::vector<int> tokens;  // ends with eos unless truncated
  bool truncated = false;
  double score = 0.0;  // length-normalized log-probability
};

class MtnModel {
 public:
  MtnModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Replaces the loss weights in place (used by the decay schedule).
  /// Weights must stay nonnegative.
  void set_loss_weights(double alpha, double beta);

  /// Ordered answer-decoder memory names active under the config.
  std::vector<std::string> active_memories() const;
  /// Parameter names belonging to the two translators.
  std::vector<std::string> translator_params() const;

  ExampleLoss forward(const ExampleView& ex, const Forward& fw) const;
  BatchLoss forward_batch(const DialogBatch& batch, FeatureLoader* features,
                          const Forward& fw) const;

  /// Token-level encoding of the flattened history by the hierarchical
  /// stack (diagnostic surface; the sentence pooling below indexes into it).
  Tensor history_tokens_encoding(const std::vector<int>& flat, const Forward& fw) const;
  /// Sentence-level history vectors z_hiss: the token-level encoding
  /// gathered at each eos position, one row per history turn.
  Tensor history_vectors(const std::vector<std::vector<int>>& history, const Forward& fw) const;
  /// Teacher-forced logits [len(answer), vocab] for one example's answer.
  Tensor answer_token_logits(const ExampleView& ex, const Forward& fw) const;

  ExampleView view(const TokenizedExample& ex, FeatureLoader* features) const;
  ExampleView view(const DialogBatch& batch, int b, FeatureLoader* features) const;

  GenResult generate(const ExampleView& ex, DecodeMode mode, int beam_width, int max_len) const;

 private:
  struct Streams;
  Streams assemble(const ExampleView& ex, const Forward& fw, bool with_losses) const;
  Tensor encode_text_stream(const std::vector<int>& tokens, const Forward& fw) const;
  Tensor encode_feature_stream(const Tensor& raw, const std::string& modality,
                               const Forward& fw) const;
  Tensor answer_logits(const std::vector<int>& answer_prefix, const std::vector<Memory>& mems,
                       const Forward& fw) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace tmt
