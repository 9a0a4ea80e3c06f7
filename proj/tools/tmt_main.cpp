// Command-line front end. One subcommand per operator task; every
// subcommand is deterministic given its flags plus the seed, errors are
// single-line on stderr, and artifacts land under --out next to a
// manifest.json listing them.

#include <algorithm>
#include <climits>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tmt/config.hpp"
#include "tmt/data.hpp"
#include "tmt/error.hpp"
#include "tmt/metrics.hpp"
#include "tmt/model.hpp"
#include "tmt/synthetic.hpp"
#include "tmt/tnsr.hpp"
#include "tmt/train.hpp"
#include "tmt/validate.hpp"
#include "tmt/vocab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw tmt::FormatError(tmt::msg("cannot open ", path.string(), " for writing"));
  out << text;
  if (!out) throw tmt::FormatError(tmt::msg("write failed for ", path.string()));
}

fs::path ensure_out_dir(const std::string& out) {
  if (out.empty()) throw tmt::ConfigError("an output directory is required (--out)");
  fs::path p(out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw tmt::FormatError(tmt::msg("cannot create directory ", p.string(), ": ",
                                          ec.message()));
  return p;
}

// Artifact listing for the out directory; sorted so the file is stable.
void write_artifact_manifest(const fs::path& dir, const std::string& command,
                             std::vector<std::string> files) {
  files.push_back("manifest.json");
  std::sort(files.begin(), files.end());
  json j;
  j["command"] = command;
  j["files"] = files;
  write_text_file(dir / "manifest.json", j.dump(2) + "\n");
}

json config_record(const tmt::RunConfig& cfg) {
  json j;
  j["record"] = "config";
  j["text"] = cfg.to_text();
  return j;
}

// Every text field of every dialog, for vocabulary building.
std::vector<std::string> corpus_texts(const std::vector<tmt::DialogRecord>& dialogs) {
  std::vector<std::string> texts;
  for (const auto& d : dialogs) {
    texts.push_back(d.caption);
    texts.push_back(d.summary);
    for (const auto& t : d.turns) {
      texts.push_back(t.question);
      texts.push_back(t.answer);
      for (const auto& r : t.answer_refs) texts.push_back(r);
    }
  }
  return texts;
}

int manifest_width(const tmt::DatasetManifest& m, const std::string& modality) {
  auto it = m.widths.find(modality);
  return it == m.widths.end() ? 0 : it->second;
}

tmt::DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "greedy") return tmt::DecodeMode::greedy;
  if (s == "beam") return tmt::DecodeMode::beam;
  throw tmt::ConfigError(tmt::msg("decode mode must be greedy or beam, got '", s, "'"));
}

int parse_refs(const std::string& s) {
  if (s == "1") return 1;
  if (s == "n") return INT_MAX;
  throw tmt::ConfigError(tmt::msg("--refs must be 1 or n, got '", s, "'"));
}

// ---------------------------------------------------------------------------
// Run configuration flags shared by the training-family subcommands. The
// config file provides the base values; any flag the user actually passed
// overrides it, and the effective config is echoed into the outputs.

struct ConfigFlags {
  std::string config_path;
  tmt::RunConfig v;  // flag storage, initialized to the documented defaults
  std::map<std::string, CLI::Option*> opts;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration file (flat key=value)");
    auto opt = [&](const char* name, auto& field, const char* help) {
      opts[name] = cmd->add_option(std::string("--") + name, field, help)->capture_default_str();
    };
    opt("d", v.d, "model width");
    opt("heads", v.heads, "attention heads");
    opt("ffn", v.ffn, "feed-forward width (0 derives 4*d)");
    opt("depth-m", v.depth_m, "video-caption translator depth M");
    opt("depth-n", v.depth_n, "history/summary/audio stack depth N");
    opt("depth-answer", v.depth_answer, "answer decoder depth");
    opt("keep-prob", v.keep_prob, "dropout keep probability");
    opt("batch", v.batch, "batch size");
    opt("epochs", v.epochs, "training epochs");
    opt("warmup", v.warmup, "warmup steps of the learning-rate schedule");
    opt("alpha", v.alpha, "caption-branch loss weight");
    opt("beta", v.beta, "summary-branch loss weight");
    opt("task", v.task, "task mode: video-text or text-only");
    opt("vct", v.vct, "video-caption translator toggle: auto, on or off");
    opt("dst", v.dst, "dialog-summary translator toggle: auto, on or off");
    opt("seed", v.seed, "random seed");
    opt("clip", v.clip, "global gradient-norm clip");
    opt("lr-factor", v.lr_factor, "multiplier on the warmup schedule");
    opt("max-len", v.max_len, "generation length cap");
    opt("beam", v.beam, "beam width for beam decoding");
    opt("data", v.data, "training dataset directory");
    opt("dev", v.dev, "dev dataset directory (defaults to --data)");
    opt("vocab-file", v.vocab_file, "vocabulary file (built from --data when empty)");
    opts["decay-weights"] = cmd->add_flag("--decay-weights", v.decay_weights,
                                          "decay alpha and beta by 0.9 every 10 epochs")
                                ->capture_default_str();
  }

  tmt::RunConfig resolve(const std::string& out_flag) const {
    tmt::RunConfig cfg;
    if (!config_path.empty())
      cfg = tmt::RunConfig::from_file(tmt::resolve_data_path(config_path));
    auto passed = [&](const char* name) { return opts.at(name)->count() > 0; };
    if (passed("d")) cfg.d = v.d;
    if (passed("heads")) cfg.heads = v.heads;
    if (passed("ffn")) cfg.ffn = v.ffn;
    if (passed("depth-m")) cfg.depth_m = v.depth_m;
    if (passed("depth-n")) cfg.depth_n = v.depth_n;
    if (passed("depth-answer")) cfg.depth_answer = v.depth_answer;
    if (passed("keep-prob")) cfg.keep_prob = v.keep_prob;
    if (passed("batch")) cfg.batch = v.batch;
    if (passed("epochs")) cfg.epochs = v.epochs;
    if (passed("warmup")) cfg.warmup = v.warmup;
    if (passed("alpha")) cfg.alpha = v.alpha;
    if (passed("beta")) cfg.beta = v.beta;
    if (passed("task")) cfg.task = v.task;
    if (passed("vct")) cfg.vct = v.vct;
    if (passed("dst")) cfg.dst = v.dst;
    if (passed("seed")) cfg.seed = v.seed;
    if (passed("clip")) cfg.clip = v.clip;
    if (passed("lr-factor")) cfg.lr_factor = v.lr_factor;
    if (passed("max-len")) cfg.max_len = v.max_len;
    if (passed("beam")) cfg.beam = v.beam;
    if (passed("data")) cfg.data = v.data;
    if (passed("dev")) cfg.dev = v.dev;
    if (passed("vocab-file")) cfg.vocab_file = v.vocab_file;
    if (passed("decay-weights")) cfg.decay_weights = v.decay_weights;
    if (!out_flag.empty()) cfg.out = out_flag;
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Dataset plumbing.

struct Split {
  tmt::Dataset dataset;
  std::vector<tmt::TokenizedExample> examples;
};

Split load_split(const std::string& dir, const tmt::Vocabulary& vocab) {
  Split s{tmt::Dataset::open(tmt::resolve_data_path(dir)), {}};
  s.examples = tmt::expand_examples(s.dataset.records, vocab);
  return s;
}

// Loads cfg.vocab_file when set, otherwise builds one from the training
// dialogs and saves it next to the other artifacts.
tmt::Vocabulary resolve_vocab(const tmt::RunConfig& cfg,
                              const std::vector<tmt::DialogRecord>& train_dialogs,
                              const fs::path& out_dir, std::vector<std::string>* artifacts) {
  if (!cfg.vocab_file.empty())
    return tmt::Vocabulary::load(tmt::resolve_data_path(cfg.vocab_file));
  tmt::Vocabulary vocab = tmt::Vocabulary::build(corpus_texts(train_dialogs), 1);
  vocab.save((out_dir / "vocab.txt").string());
  if (artifacts) artifacts->push_back("vocab.txt");
  return vocab;
}

struct TrainingInputs {
  Split train, dev;
  std::optional<tmt::Vocabulary> vocab_box;
  std::optional<tmt::FeatureLoader> train_features, dev_features;

  const tmt::Vocabulary& vocab() const { return *vocab_box; }
  tmt::FeatureLoader* train_loader() { return train_features ? &*train_features : nullptr; }
  tmt::FeatureLoader* dev_loader() { return dev_features ? &*dev_features : nullptr; }
  int video_width() const { return manifest_width(train.dataset.manifest, "video"); }
  int audio_width() const { return manifest_width(train.dataset.manifest, "audio"); }
};

TrainingInputs load_training_inputs(const tmt::RunConfig& cfg, const fs::path& out_dir,
                                    std::vector<std::string>* artifacts) {
  if (cfg.data.empty()) throw tmt::ConfigError("a training dataset is required (--data)");
  TrainingInputs in{};
  tmt::Vocabulary vocab = [&] {
    tmt::Dataset train = tmt::Dataset::open(tmt::resolve_data_path(cfg.data));
    tmt::Vocabulary v = resolve_vocab(cfg, train.records, out_dir, artifacts);
    in.train.dataset = std::move(train);
    return v;
  }();
  in.train.examples = tmt::expand_examples(in.train.dataset.records, vocab);
  in.dev = cfg.dev.empty() ? in.train : load_split(cfg.dev, vocab);
  in.vocab_box.emplace(std::move(vocab));
  in.train_features.emplace(in.train.dataset.manifest);
  in.dev_features.emplace(in.dev.dataset.manifest);
  return in;
}

tmt::MtnModel build_model(const tmt::RunConfig& cfg, const TrainingInputs& in) {
  return tmt::MtnModel(
      cfg.model_config(in.vocab().size(), in.video_width(), in.audio_width()), cfg.seed);
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string spec_path, out;
  tmt::SyntheticSpec sp;
  std::map<std::string, CLI::Option*> opts;
};

tmt::SyntheticSpec parse_spec_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw tmt::FormatError(tmt::msg("cannot open spec file ", path));
  tmt::SyntheticSpec sp;
  std::map<std::string, bool> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string body = line.substr(0, line.find('#'));
    size_t a = body.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    size_t b = body.find_last_not_of(" \t\r");
    body = body.substr(a, b - a + 1);
    size_t eq = body.find('=');
    if (eq == std::string::npos)
      throw tmt::ConfigError(tmt::msg("spec file line ", line_no, ": expected key=value"));
    auto trim = [](std::string s) {
      size_t x = s.find_first_not_of(" \t");
      size_t y = s.find_last_not_of(" \t");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    std::string key = trim(body.substr(0, eq));
    std::string val = trim(body.substr(eq + 1));
    if (seen[key])
      throw tmt::ConfigError(tmt::msg("spec file line ", line_no, ": duplicate key '", key, "'"));
    seen[key] = true;
    std::istringstream vs(val);
    bool ok = false;
    if (key == "dialogs") ok = static_cast<bool>(vs >> sp.dialogs);
    else if (key == "turns") ok = static_cast<bool>(vs >> sp.turns);
    else if (key == "actions") ok = static_cast<bool>(vs >> sp.actions);
    else if (key == "actions_per_dialog") ok = static_cast<bool>(vs >> sp.actions_per_dialog);
    else if (key == "frames_per_action") ok = static_cast<bool>(vs >> sp.frames_per_action);
    else if (key == "d_feat") ok = static_cast<bool>(vs >> sp.d_feat);
    else if (key == "noise") ok = static_cast<bool>(vs >> sp.noise);
    else if (key == "seed") ok = static_cast<bool>(vs >> sp.seed);
    else throw tmt::ConfigError(tmt::msg("spec file line ", line_no, ": unknown key '", key, "'"));
    char extra;
    if (!ok || (vs >> extra))
      throw tmt::ConfigError(tmt::msg("spec file line ", line_no, ": bad value for '", key, "'"));
  }
  return sp;
}

std::string spec_text(const tmt::SyntheticSpec& sp) {
  std::ostringstream os;
  os << "dialogs=" << sp.dialogs << "\nturns=" << sp.turns << "\nactions=" << sp.actions
     << "\nactions_per_dialog=" << sp.actions_per_dialog
     << "\nframes_per_action=" << sp.frames_per_action << "\nd_feat=" << sp.d_feat
     << "\nnoise=" << sp.noise << "\nseed=" << sp.seed << "\n";
  return os.str();
}

void attach_gen_data(CLI::App* cmd, GenDataArgs& a) {
  cmd->add_option("--spec", a.spec_path, "synthetic geometry file (flat key=value)");
  auto opt = [&](const char* name, auto& field, const char* help) {
    a.opts[name] = cmd->add_option(std::string("--") + name, field, help)->capture_default_str();
  };
  opt("dialogs", a.sp.dialogs, "dialog count");
  opt("turns", a.sp.turns, "turns per dialog");
  opt("actions", a.sp.actions, "distinct action words");
  opt("actions-per-dialog", a.sp.actions_per_dialog, "action draws per dialog");
  opt("frames-per-action", a.sp.frames_per_action, "video rows per action");
  opt("d-feat", a.sp.d_feat, "feature width");
  opt("noise", a.sp.noise, "feature noise sigma");
  opt("seed", a.sp.seed, "generator seed");
  cmd->add_option("--out", a.out, "output dataset directory")->required();
}

int run_gen_data(GenDataArgs& a) {
  tmt::SyntheticSpec sp;
  if (!a.spec_path.empty()) sp = parse_spec_file(tmt::resolve_data_path(a.spec_path));
  auto passed = [&](const char* name) { return a.opts.at(name)->count() > 0; };
  if (passed("dialogs")) sp.dialogs = a.sp.dialogs;
  if (passed("turns")) sp.turns = a.sp.turns;
  if (passed("actions")) sp.actions = a.sp.actions;
  if (passed("actions-per-dialog")) sp.actions_per_dialog = a.sp.actions_per_dialog;
  if (passed("frames-per-action")) sp.frames_per_action = a.sp.frames_per_action;
  if (passed("d-feat")) sp.d_feat = a.sp.d_feat;
  if (passed("noise")) sp.noise = a.sp.noise;
  if (passed("seed")) sp.seed = a.sp.seed;
  fs::path out_dir = ensure_out_dir(a.out);
  tmt::generate_synthetic(sp, out_dir.string());
  write_text_file(out_dir / "spec.txt", spec_text(sp));
  std::cout << "dialogs=" << sp.dialogs << " turns=" << sp.turns << " out=" << out_dir.string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// build-vocab

struct BuildVocabArgs {
  std::vector<std::string> corpus;
  int min_count = 1;
  std::string out;
};

int run_build_vocab(const BuildVocabArgs& a) {
  std::vector<std::string> texts;
  for (const std::string& c : a.corpus) {
    std::string path = tmt::resolve_data_path(c);
    std::vector<tmt::DialogRecord> dialogs = fs::is_directory(path)
                                                 ? tmt::Dataset::open(path).records
                                                 : tmt::load_dialogs(path);
    std::vector<std::string> t = corpus_texts(dialogs);
    texts.insert(texts.end(), t.begin(), t.end());
  }
  tmt::Vocabulary vocab = tmt::Vocabulary::build(texts, a.min_count);
  vocab.save(a.out);
  std::cout << "vocab_size=" << vocab.size() << " out=" << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

int run_train(const ConfigFlags& cf, const std::string& out_flag) {
  tmt::RunConfig cfg = cf.resolve(out_flag);
  fs::path out_dir = ensure_out_dir(cfg.out);
  std::vector<std::string> artifacts{"config.txt", "run.jsonl"};
  TrainingInputs in = load_training_inputs(cfg, out_dir, &artifacts);
  tmt::MtnModel model = build_model(cfg, in);
  tmt::RunRecord rec =
      tmt::train_model(model, cfg, in.train.examples, in.dev.examples, in.train_loader(),
                       in.dev_loader(), (out_dir / "best.ckpt").string());
  rec.save((out_dir / "run.jsonl").string());
  write_text_file(out_dir / "config.txt", cfg.to_text());
  if (!rec.checkpoint.empty()) artifacts.push_back("best.ckpt");
  write_artifact_manifest(out_dir, "train", std::move(artifacts));
  std::cout << "epochs=" << rec.epochs.size() << " best_epoch=" << rec.best_epoch
            << " best_dev_ppl=" << rec.best_dev_ppl << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// grid-search

int run_grid_search(const ConfigFlags& cf, const std::string& out_flag,
                    std::vector<double> alpha_grid, std::vector<double> beta_grid, int jobs) {
  tmt::RunConfig cfg = cf.resolve(out_flag);
  fs::path out_dir = ensure_out_dir(cfg.out);
  std::vector<std::string> artifacts{"config.txt", "grid.jsonl", "best_run.jsonl"};
  TrainingInputs in = load_training_inputs(cfg, out_dir, &artifacts);
  tmt::GridResult gr = tmt::grid_search(
      cfg, std::move(alpha_grid), std::move(beta_grid), in.vocab().size(), in.video_width(),
      in.audio_width(), in.train.examples, in.dev.examples, &in.train.dataset.manifest,
      &in.dev.dataset.manifest, jobs);

  std::ostringstream lines;
  lines << config_record(cfg).dump() << "\n";
  for (const tmt::GridPoint& p : gr.points) {
    json j;
    j["record"] = "point";
    j["alpha"] = p.alpha;
    j["beta"] = p.beta;
    j["seed"] = p.seed;
    j["best_dev_ppl"] = p.best_dev_ppl;
    j["best_epoch"] = p.best_epoch;
    lines << j.dump() << "\n";
  }
  json w;
  w["record"] = "winner";
  w["alpha"] = gr.best_alpha;
  w["beta"] = gr.best_beta;
  w["best_dev_ppl"] = gr.best_record.best_dev_ppl;
  w["best_epoch"] = gr.best_record.best_epoch;
  lines << w.dump() << "\n";
  write_text_file(out_dir / "grid.jsonl", lines.str());
  gr.best_record.save((out_dir / "best_run.jsonl").string());
  write_text_file(out_dir / "config.txt", cfg.to_text());
  write_artifact_manifest(out_dir, "grid-search", std::move(artifacts));
  std::cout << "winner alpha=" << gr.best_alpha << " beta=" << gr.best_beta
            << " best_dev_ppl=" << gr.best_record.best_dev_ppl << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate / generate

struct EvalArgs {
  std::string checkpoint, hyps, mode = "greedy", refs = "1";
  int beam_width = 0;  // 0 takes the config's beam
};

tmt::MtnModel load_checkpoint_model(const tmt::RunConfig& cfg, const TrainingInputs& in,
                                    const std::string& checkpoint) {
  tmt::MtnModel model = build_model(cfg, in);
  tmt::checkpoint_load(tmt::resolve_data_path(checkpoint), model.params());
  return model;
}

// Scores a pre-generated hypothesis file; perplexity needs a model, so it
// stays 0 unless a checkpoint is also given.
tmt::MetricReport score_hypothesis_file(const tmt::RunConfig& cfg, TrainingInputs& in,
                                        const EvalArgs& a, int max_refs) {
  std::vector<tmt::HypLine> hyps = tmt::load_hypotheses(tmt::resolve_data_path(a.hyps));
  tmt::EvalCorpus corpus = tmt::corpus_from_hypotheses(hyps, in.dev.examples, in.vocab(), max_refs);
  tmt::MetricReport rep;
  rep.bleu4 = tmt::bleu4(corpus);
  rep.rouge_l = tmt::rouge_l(corpus);
  rep.cider = tmt::cider(corpus);
  rep.items = static_cast<int>(corpus.size());
  rep.decode = "file";
  rep.beam_width = 0;
  int min_refs = INT_MAX;
  for (const auto& item : corpus) min_refs = std::min(min_refs, static_cast<int>(item.refs.size()));
  rep.refs = corpus.empty() ? 0 : min_refs;
  if (!a.checkpoint.empty()) {
    tmt::MtnModel model = load_checkpoint_model(cfg, in, a.checkpoint);
    rep.perplexity =
        tmt::perplexity_eval(model, in.dev.examples, in.dev_loader(), cfg.batch);
  }
  return rep;
}

int run_evaluate(const ConfigFlags& cf, const std::string& out_flag, const EvalArgs& a) {
  tmt::RunConfig cfg = cf.resolve(out_flag);
  fs::path out_dir = ensure_out_dir(cfg.out);
  std::vector<std::string> artifacts{"config.txt", "metrics.txt", "metrics.jsonl"};
  TrainingInputs in = load_training_inputs(cfg, out_dir, &artifacts);
  const int max_refs = parse_refs(a.refs);
  const int beam = a.beam_width > 0 ? a.beam_width : cfg.beam;

  tmt::MetricReport rep;
  if (!a.hyps.empty()) {
    rep = score_hypothesis_file(cfg, in, a, max_refs);
  } else {
    if (a.checkpoint.empty())
      throw tmt::ConfigError("evaluate needs --checkpoint (or --hyps for a hypothesis file)");
    tmt::MtnModel model = load_checkpoint_model(cfg, in, a.checkpoint);
    std::vector<tmt::HypLine> hyps;
    rep = tmt::evaluate_run(model, in.dev.examples, in.dev_loader(), in.vocab(),
                            parse_decode_mode(a.mode), beam, cfg.max_len, max_refs, cfg.batch,
                            &hyps);
    tmt::save_hypotheses((out_dir / "hypotheses.txt").string(), hyps);
    artifacts.push_back("hypotheses.txt");
  }
  write_text_file(out_dir / "metrics.txt", rep.table());
  write_text_file(out_dir / "metrics.jsonl", config_record(cfg).dump() + "\n" + rep.records());
  write_text_file(out_dir / "config.txt", cfg.to_text());
  write_artifact_manifest(out_dir, "evaluate", std::move(artifacts));
  std::cout << rep.table();
  return 0;
}

int run_generate(const ConfigFlags& cf, const std::string& out_flag, const EvalArgs& a) {
  tmt::RunConfig cfg = cf.resolve(out_flag);
  fs::path out_dir = ensure_out_dir(cfg.out);
  std::vector<std::string> artifacts{"config.txt", "hypotheses.txt"};
  TrainingInputs in = load_training_inputs(cfg, out_dir, &artifacts);
  if (a.checkpoint.empty()) throw tmt::ConfigError("generate needs --checkpoint");
  tmt::MtnModel model = load_checkpoint_model(cfg, in, a.checkpoint);
  const tmt::DecodeMode mode = parse_decode_mode(a.mode);
  const int beam = a.beam_width > 0 ? a.beam_width : cfg.beam;

  std::vector<tmt::HypLine> hyps;
  hyps.reserve(in.dev.examples.size());
  for (const tmt::TokenizedExample& ex : in.dev.examples) {
    tmt::GenResult g = model.generate(model.view(ex, in.dev_loader()), mode, beam, cfg.max_len);
    hyps.push_back({ex.dialog_id, ex.turn_index, in.vocab().decode(g.tokens)});
  }
  tmt::save_hypotheses((out_dir / "hypotheses.txt").string(), hyps);
  write_text_file(out_dir / "config.txt", cfg.to_text());
  write_artifact_manifest(out_dir, "generate", std::move(artifacts));
  std::cout << "hypotheses=" << hyps.size() << " out=" << (out_dir / "hypotheses.txt").string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

int run_grad_check(const ConfigFlags& cf, const std::string& module) {
  tmt::RunConfig cfg = cf.resolve(std::string());
  std::vector<tmt::ValidationCase> cases = tmt::grad_check_layers(cfg.seed);
  if (module.empty() || module == "full_model_loss")
    cases.push_back(tmt::grad_check_model(cfg.seed));
  if (!module.empty()) {
    std::vector<tmt::ValidationCase> kept;
    std::vector<std::string> names;
    for (const auto& c : cases) {
      names.push_back(c.name);
      if (c.name == module) kept.push_back(c);
    }
    if (kept.empty()) {
      if (names.empty() || names.back() != "full_model_loss") names.push_back("full_model_loss");
      std::string all;
      for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
      throw tmt::ConfigError(tmt::msg("unknown module '", module, "'; one of: ", all));
    }
    cases = std::move(kept);
  }
  double worst = 0.0;
  bool all_pass = true;
  for (const auto& c : cases) {
    std::cout << c.name << " max_rel_err=" << c.max_rel_err << " tolerance=" << c.tolerance
              << (c.pass ? " pass" : " FAIL") << "\n";
    worst = std::max(worst, c.max_rel_err);
    all_pass = all_pass && c.pass;
  }
  std::cout << "max relative error: " << worst << "\n";
  return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// repeat

int run_repeat(const ConfigFlags& cf, const std::string& out_flag, int n, uint64_t seed_base,
               const EvalArgs& a) {
  if (n < 1) throw tmt::ConfigError("--n must be at least 1");
  tmt::RunConfig cfg = cf.resolve(out_flag);
  fs::path out_dir = ensure_out_dir(cfg.out);
  std::vector<std::string> artifacts{"config.txt", "repeat.jsonl"};
  TrainingInputs in = load_training_inputs(cfg, out_dir, &artifacts);
  const int max_refs = parse_refs(a.refs);
  const tmt::DecodeMode mode = parse_decode_mode(a.mode);
  const int beam = a.beam_width > 0 ? a.beam_width : cfg.beam;

  std::ostringstream lines;
  lines << config_record(cfg).dump() << "\n";
  std::map<std::string, std::vector<double>> series;
  for (int i = 0; i < n; ++i) {
    tmt::RunConfig rc = cfg;
    rc.seed = seed_base + static_cast<uint64_t>(i);
    fs::path run_dir = out_dir / tmt::msg("run", i);
    ensure_out_dir(run_dir.string());
    tmt::MtnModel model = build_model(rc, in);
    tmt::FeatureLoader ftrain(in.train.dataset.manifest), fdev(in.dev.dataset.manifest);
    tmt::FeatureLoader* tlp = &ftrain;
    tmt::FeatureLoader* dlp = &fdev;
    tmt::RunRecord rec = tmt::train_model(model, rc, in.train.examples, in.dev.examples, tlp, dlp,
                                          (run_dir / "best.ckpt").string());
    rec.save((run_dir / "run.jsonl").string());
    artifacts.push_back(tmt::msg("run", i, "/run.jsonl"));
    if (!rec.checkpoint.empty()) {
      artifacts.push_back(tmt::msg("run", i, "/best.ckpt"));
      tmt::checkpoint_load(rec.checkpoint, model.params());
    }
    tmt::MetricReport rep = tmt::evaluate_run(model, in.dev.examples, dlp, in.vocab(), mode, beam,
                                              rc.max_len, max_refs, rc.batch);
    json j;
    j["record"] = "run";
    j["i"] = i;
    j["seed"] = rc.seed;
    j["best_dev_ppl"] = rec.best_dev_ppl;
    j["best_epoch"] = rec.best_epoch;
    j["bleu4"] = rep.bleu4;
    j["rouge_l"] = rep.rouge_l;
    j["cider"] = rep.cider;
    j["perplexity"] = rep.perplexity;
    lines << j.dump() << "\n";
    series["best_dev_ppl"].push_back(rec.best_dev_ppl);
    series["bleu4"].push_back(rep.bleu4);
    series["rouge_l"].push_back(rep.rouge_l);
    series["cider"].push_back(rep.cider);
    series["perplexity"].push_back(rep.perplexity);
  }
  for (const auto& [name, values] : series) {
    tmt::MeanStd ms = tmt::mean_std(values);
    json j;
    j["record"] = "aggregate";
    j["metric"] = name;
    j["mean"] = ms.mean;
    j["stddev"] = ms.stddev;
    j["n"] = ms.n;
    lines << j.dump() << "\n";
    std::cout << name << " mean=" << ms.mean << " std=" << ms.stddev << " n=" << ms.n << "\n";
  }
  write_text_file(out_dir / "repeat.jsonl", lines.str());
  write_text_file(out_dir / "config.txt", cfg.to_text());
  write_artifact_manifest(out_dir, "repeat", std::move(artifacts));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal dialog model: data, training, search and evaluation"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic multimodal dialog dataset");
  attach_gen_data(gen, gen_args);

  BuildVocabArgs bv_args;
  CLI::App* bv = app.add_subcommand("build-vocab", "build a vocabulary from dialog corpora");
  bv->add_option("--corpus", bv_args.corpus, "dataset directories or dialog files")->required();
  bv->add_option("--min-count", bv_args.min_count, "minimum token count")->capture_default_str();
  bv->add_option("--out", bv_args.out, "vocabulary output file")->required();

  ConfigFlags train_cf;
  std::string train_out;
  CLI::App* train = app.add_subcommand("train", "train a model and checkpoint the best epoch");
  train_cf.attach(train);
  train->add_option("--out", train_out, "artifact directory");

  ConfigFlags grid_cf;
  std::string grid_out;
  std::vector<double> alpha_grid{0.0, 0.1, 0.3, 0.5, 0.8, 1.0};
  std::vector<double> beta_grid{0.0, 0.1, 0.3, 0.5, 0.8, 1.0};
  int grid_jobs = 1;
  CLI::App* grid = app.add_subcommand("grid-search", "train once per (alpha, beta) grid point");
  grid_cf.attach(grid);
  grid->add_option("--out", grid_out, "artifact directory");
  grid->add_option("--alpha-grid", alpha_grid, "alpha values")
      ->delimiter(',')
      ->capture_default_str();
  grid->add_option("--beta-grid", beta_grid, "beta values")->delimiter(',')->capture_default_str();
  grid->add_option("--jobs", grid_jobs, "worker threads")->capture_default_str();

  ConfigFlags eval_cf;
  std::string eval_out;
  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("evaluate", "score generations against references");
  eval_cf.attach(eval);
  eval->add_option("--out", eval_out, "artifact directory");
  eval->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint to evaluate");
  eval->add_option("--hyps", eval_args.hyps, "score this hypothesis file instead of generating");
  eval->add_option("--mode", eval_args.mode, "decode mode: greedy or beam")->capture_default_str();
  eval->add_option("--beam-width", eval_args.beam_width, "beam width (0 takes --beam)")
      ->capture_default_str();
  eval->add_option("--refs", eval_args.refs, "references per item: 1 or n")->capture_default_str();

  ConfigFlags gen_text_cf;
  std::string gen_text_out;
  EvalArgs gen_text_args;
  CLI::App* gen_text = app.add_subcommand("generate", "write generated answers for a dataset");
  gen_text_cf.attach(gen_text);
  gen_text->add_option("--out", gen_text_out, "artifact directory");
  gen_text->add_option("--checkpoint", gen_text_args.checkpoint, "model checkpoint")->required();
  gen_text->add_option("--mode", gen_text_args.mode, "decode mode: greedy or beam")
      ->capture_default_str();
  gen_text->add_option("--beam-width", gen_text_args.beam_width, "beam width (0 takes --beam)")
      ->capture_default_str();

  ConfigFlags gc_cf;
  std::string gc_module;
  CLI::App* gc = app.add_subcommand("grad-check", "finite-difference audit of the gradients");
  gc_cf.attach(gc);
  gc->add_option("--module", gc_module, "restrict to one named check");

  ConfigFlags rep_cf;
  std::string rep_out;
  EvalArgs rep_eval;
  int rep_n = 3;
  uint64_t rep_seed_base = 1;
  CLI::App* rep = app.add_subcommand("repeat", "train n times and report mean/std per metric");
  rep_cf.attach(rep);
  rep->add_option("--out", rep_out, "artifact directory");
  rep->add_option("--n", rep_n, "number of runs")->capture_default_str();
  rep->add_option("--seed-base", rep_seed_base, "seed of run 0; run i uses seed-base + i")
      ->capture_default_str();
  rep->add_option("--mode", rep_eval.mode, "decode mode: greedy or beam")->capture_default_str();
  rep->add_option("--beam-width", rep_eval.beam_width, "beam width (0 takes --beam)")
      ->capture_default_str();
  rep->add_option("--refs", rep_eval.refs, "references per item: 1 or n")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "tmt: ConfigError: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*gen) return run_gen_data(gen_args);
    if (*bv) return run_build_vocab(bv_args);
    if (*train) return run_train(train_cf, train_out);
    if (*grid) return run_grid_search(grid_cf, grid_out, alpha_grid, beta_grid, grid_jobs);
    if (*eval) return run_evaluate(eval_cf, eval_out, eval_args);
    if (*gen_text) return run_generate(gen_text_cf, gen_text_out, gen_text_args);
    if (*gc) return run_grad_check(gc_cf, gc_module);
    if (*rep) return run_repeat(rep_cf, rep_out, rep_n, rep_seed_base, rep_eval);
  } catch (const tmt::Error& e) {
    std::cerr << "tmt: " << one_line(e.what()) << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "tmt: InternalError: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
