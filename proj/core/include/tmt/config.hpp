#pragma once

#include <string>

#include "tmt/model.hpp"

namespace tmt {

/// Flat key=value run configuration. Every key has a default; unknown or
/// duplicate keys are rejected, and parse(serialize(x)) == x.
struct RunConfig {
  int d = 128;
  int heads = 4;
  int ffn = 0;  // 0 derives 4*d
  int depth_m = 2;
  int depth_n = 1;
  int depth_answer = 3;
  double keep_prob = 0.5;
  int batch = 32;
  int epochs = 35;
  int warmup = 400;
  double alpha = 0.3;
  double beta = 0.8;
  std::string task = "video-text";
  std::string vct = "auto";
  std::string dst = "auto";
  uint64_t seed = 1;
  double clip = 5.0;
  double lr_factor = 1.0;
  bool decay_weights = false;
  int max_len = 20;
  int beam = 5;
  std::string data;
  std::string dev;
  std::string out;
  std::string vocab_file;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);
  std::string to_text() const;

  void validate() const;
  int ffn_width() const { return ffn > 0 ? ffn : 4 * d; }
  TaskMode task_mode() const;
  Toggle vct_toggle() const;
  Toggle dst_toggle() const;
  /// Derives the model geometry; feature widths are taken from the
  /// dataset manifest.
  ModelConfig model_config(int vocab, int d_feat_video, int d_feat_audio) const;
};

/// Prefixes relative paths with $TMT_DATA_ROOT when it is set.
std::string resolve_data_path(const std::string& path);

}  // namespace tmt
