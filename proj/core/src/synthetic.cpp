#include "tmt/synthetic.hpp"

#include <algorithm>
#include <filesystem>
#include <set>

#include "tmt/rng.hpp"
#include "tmt/tnsr.hpp"

namespace tmt {

namespace {

// Distinct verbs, none colliding with the sentence-template words below.
const char* kVerbs[] = {"bounce", "carry",  "dance", "fold", "grab", "hop",   "jump",  "kick",
                        "laugh",  "march",  "nod",   "open", "point", "run",  "sit",   "spin",
                        "throw",  "tumble", "wave",  "yawn", "zip",  "climb", "crawl", "slide"};
constexpr int kNamedVerbs = static_cast<int>(sizeof(kVerbs) / sizeof(kVerbs[0]));

std::string join(const std::vector<std::string>& words, const std::string& sep) {
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (dialogs < 1) throw ConfigError(msg("dialog count ", dialogs, " < 1"));
  if (turns < 1) throw ConfigError(msg("turn count ", turns, " < 1"));
  if (actions < 2) throw ConfigError(msg("action vocabulary ", actions, " < 2"));
  if (actions_per_dialog < 1)
    throw ConfigError(msg("actions per dialog ", actions_per_dialog, " < 1"));
  if (frames_per_action < 1)
    throw ConfigError(msg("frames per action ", frames_per_action, " < 1"));
  if (d_feat < actions)
    throw ConfigError(msg("feature width ", d_feat, " cannot one-hot ", actions, " actions"));
  if (noise < 0.0) throw ConfigError(msg("negative feature noise ", noise));
}

std::string action_word(int a) {
  if (a < 0) throw ContractError(msg("negative action index ", a));
  if (a < kNamedVerbs) return kVerbs[a];
  return "act" + std::to_string(a);
}

namespace {

Tensor encode_blocks(const std::vector<int>& acts, const SyntheticSpec& spec, Rng& rng) {
  const int t = static_cast<int>(acts.size()) * spec.frames_per_action;
  Tensor f(Shape{t, spec.d_feat});
  auto& d = f.mutable_data();
  for (size_t b = 0; b < acts.size(); ++b)
    for (int r = 0; r < spec.frames_per_action; ++r) {
      const int64_t row = (static_cast<int64_t>(b) * spec.frames_per_action + r) * spec.d_feat;
      for (int j = 0; j < spec.d_feat; ++j)
        d[static_cast<size_t>(row + j)] =
            (j == acts[b] ? 1.0 : 0.0) + (spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0);
    }
  return f;
}

}  // namespace

SyntheticData generate_synthetic_data(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticData out;
  for (int i = 0; i < spec.dialogs; ++i) {
    Rng rng(derive_seed(spec.seed, "dialog" + std::to_string(i)));
    DialogRecord rec;
    rec.id = "syn" + std::to_string(100000 + i).substr(1);

    std::vector<int> acts(static_cast<size_t>(spec.actions_per_dialog));
    for (int& a : acts) a = rng.uniform_int(spec.actions);

    std::vector<std::string> words;
    for (int a : acts) words.push_back(action_word(a));
    rec.caption = "the person does " + join(words, " then ");

    std::set<std::string> uniq(words.begin(), words.end());
    rec.summary = "overall the person does " +
                  join(std::vector<std::string>(uniq.begin(), uniq.end()), " and ");

    for (int t = 0; t < spec.turns; ++t) {
      DialogTurn turn;
      if (t % 2 == 0) {
        const int pos = (t / 2) % spec.actions_per_dialog;
        turn.question = "what is action number " + std::to_string(pos + 1);
        turn.answer = "the person does " + words[static_cast<size_t>(pos)];
      } else {
        const std::string probe = action_word(rng.uniform_int(spec.actions));
        const bool present = uniq.count(probe) > 0;
        turn.question = "does the person " + probe;
        turn.answer = present ? "yes the person does " + probe
                              : "no the person does not " + probe;
      }
      rec.turns.push_back(std::move(turn));
    }

    out.video.emplace(rec.id, encode_blocks(acts, spec, rng));
    std::vector<int> audible;
    for (size_t j = 0; j < acts.size(); j += 2) audible.push_back(acts[j]);
    out.audio.emplace(rec.id, encode_blocks(audible, spec, rng));
    out.actions.emplace(rec.id, std::move(acts));
    out.dialogs.push_back(std::move(rec));
  }
  return out;
}

void generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  SyntheticData data = generate_synthetic_data(spec);
  fs::create_directories(fs::path(out_dir) / "features");

  save_dialogs((fs::path(out_dir) / "dialogs.jsonl").string(), data.dialogs);
  for (const auto& [id, t] : data.video)
    save_tensor_file((fs::path(out_dir) / "features" / (id + ".video.tnsr")).string(), t);
  for (const auto& [id, t] : data.audio)
    save_tensor_file((fs::path(out_dir) / "features" / (id + ".audio.tnsr")).string(), t);

  DatasetManifest m;
  // Stored relative to the manifest itself so the dataset directory can be
  // moved or mounted anywhere; load() joins them back onto its location.
  m.dialog_file = "dialogs.jsonl";
  m.feature_dir = "features";
  m.suffixes = {{"video", ".video.tnsr"}, {"audio", ".audio.tnsr"}};
  m.widths = {{"video", spec.d_feat}, {"audio", spec.d_feat}};
  m.save((fs::path(out_dir) / "manifest.json").string());
}

std::vector<int> decode_actions(const Tensor& features, int frames_per_action, int actions) {
  if (features.rank() != 2)
    throw ConformanceError(msg("feature tensor has shape ", shape_str(features.shape())));
  if (frames_per_action < 1 || features.extent(0) % frames_per_action != 0)
    throw ContractError(msg(features.extent(0), " rows do not split into blocks of ",
                            frames_per_action));
  const int blocks = features.extent(0) / frames_per_action;
  const int width = features.extent(1);
  std::vector<int> out;
  for (int b = 0; b < blocks; ++b) {
    double best = -1e300;
    int arg = 0;
    for (int j = 0; j < std::min(actions, width); ++j) {
      double mean = 0.0;
      for (int r = 0; r < frames_per_action; ++r)
        mean += features.data()[(static_cast<int64_t>(b) * frames_per_action + r) * width + j];
      if (mean > best) {
        best = mean;
        arg = j;
      }
    }
    out.push_back(arg);
  }
  return out;
}

}  // namespace tmt
