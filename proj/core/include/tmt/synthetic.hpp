#pragma once

#include <map>
#include <string>
#include <vector>

#include "tmt/data.hpp"
#include "tmt/tensor.hpp"

namespace tmt {

/// Geometry of the generated corpus. Videos encode a drawn action
/// sequence as one-hot blocks plus Gaussian noise; captions, summaries,
/// questions and answers are deterministic functions of those actions, so
/// the translators' supervision carries real signal.
struct SyntheticSpec {
  int dialogs = 32;
  int turns = 3;
  int actions = 8;             // distinct action words in play
  int actions_per_dialog = 4;  // draws per dialog, with replacement
  int frames_per_action = 2;   // video rows per action block
  int d_feat = 16;             // feature width, >= actions
  double noise = 0.1;          // per-entry Gaussian sigma
  uint64_t seed = 1;

  void validate() const;
};

/// Word used for action index a; stable across runs.
std::string action_word(int a);

/// In-memory generation: dialogs plus per-id video/audio features.
struct SyntheticData {
  std::vector<DialogRecord> dialogs;
  std::map<std::string, Tensor> video;  // id -> [T_v, d_feat]
  std::map<std::string, Tensor> audio;  // id -> [T_a, d_feat]
  std::map<std::string, std::vector<int>> actions;  // id -> drawn action ids
};
SyntheticData generate_synthetic_data(const SyntheticSpec& spec);

/// Writes dialogs.jsonl, features/*.tnsr and manifest.json under out_dir.
/// Byte-identical for identical specs.
void generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

/// Nearest-one-hot decoding of an action sequence from a feature tensor:
/// argmax of each block's column means. The Bayes-optimal decoder for the
/// generator's noise model.
std::vector<int> decode_actions(const Tensor& features, int frames_per_action, int actions);

}  // namespace tmt
