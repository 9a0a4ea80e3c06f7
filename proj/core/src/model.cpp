#include "tmt/model.hpp"

#include <algorithm>
#include <cmath>

namespace tmt {

void ModelConfig::validate() const {
  if (d < 2 || d % 2 != 0) throw ConfigError(msg("model width ", d, " must be even and >= 2"));
  if (heads < 1 || d % heads != 0)
    throw ConfigError(msg("width ", d, " not divisible by ", heads, " heads"));
  if (d_ff < 1) throw ConfigError(msg("feed-forward width ", d_ff, " < 1"));
  if (depth_m < 1 || depth_n < 1 || depth_answer < 1)
    throw ConfigError(msg("stack depths must be >= 1, got ", depth_m, "/", depth_n, "/",
                          depth_answer));
  if (vocab < 5) throw ConfigError(msg("vocabulary size ", vocab, " too small"));
  if (keep_prob <= 0.0 || keep_prob > 1.0)
    throw ConfigError(msg("keep probability ", keep_prob, " outside (0, 1]"));
  if (alpha < 0.0 || beta < 0.0)
    throw ConfigError(msg("loss weights must be nonnegative, got alpha=", alpha,
                          " beta=", beta));
  if (uses_video() && d_feat_video < 1)
    throw ConfigError("video-text mode needs a positive video feature width");
  if (uses_audio() && d_feat_audio < 1)
    throw ConfigError("video-text mode needs a positive audio feature width");
  vct_enabled();
  dst_enabled();
}

bool ModelConfig::vct_enabled() const {
  if (vct == Toggle::off) return false;
  if (task == TaskMode::text_only) {
    if (vct == Toggle::on)
      throw ConfigError("video-caption translator requested in text-only mode");
    return false;
  }
  return true;
}

bool ModelConfig::dst_enabled() const { return dst != Toggle::off; }

Tensor total_loss(const Tensor& l_ans, const Tensor& l_c, const Tensor& l_s, double alpha,
                  double beta) {
  if (alpha < 0.0 || beta < 0.0)
    throw ConfigError(msg("loss weights must be nonnegative, got alpha=", alpha,
                          " beta=", beta));
  return add(add(l_ans, scale(l_c, alpha)), scale(l_s, beta));
}

MtnModel::MtnModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();

  // Independent init stream per component: enabling or disabling one
  // component leaves every other component's initial values unchanged.
  auto rng_for = [seed](const std::string& label) { return Rng(derive_seed(seed, label)); };

  {
    Rng r = rng_for("embed");
    params_.add("embed", xavier_uniform(cfg_.vocab, cfg_.d, Shape{cfg_.vocab, cfg_.d}, r));
  }
  {
    Rng r = rng_for("hier");
    add_encoder(params_, "hier", cfg_.stack(cfg_.depth_n), r);
  }
  if (cfg_.uses_video()) {
    Rng r = rng_for("feat.video");
    add_linear(params_, "feat.video.proj", cfg_.d_feat_video, cfg_.d, r);
    add_layer_norm(params_, "feat.video.norm", cfg_.d);
  }
  if (cfg_.uses_audio()) {
    Rng r = rng_for("feat.audio");
    add_linear(params_, "feat.audio.proj", cfg_.d_feat_audio, cfg_.d, r);
    add_layer_norm(params_, "feat.audio.norm", cfg_.d);
    Rng r2 = rng_for("qa");
    add_decoder(params_, "qa", cfg_.stack(cfg_.depth_n), {"x"}, r2);
  }
  if (cfg_.vct_enabled()) {
    Rng r = rng_for("vct");
    TmtConfig tc;
    tc.depth = cfg_.depth_m;
    tc.d = cfg_.d;
    tc.heads = cfg_.heads;
    tc.d_ff = cfg_.d_ff;
    tc.embed_table = "embed";
    tc.scale_embed = cfg_.scale_embed;
    add_tmt(params_, "vct", tc, r);
  }
  if (cfg_.dst_enabled()) {
    Rng r = rng_for("dst");
    TmtConfig tc;
    tc.depth = cfg_.depth_n;
    tc.d = cfg_.d;
    tc.heads = cfg_.heads;
    tc.d_ff = cfg_.d_ff;
    tc.embed_table = "embed";
    tc.scale_embed = cfg_.scale_embed;
    add_tmt(params_, "dst", tc, r);
  }
  {
    Rng r = rng_for("ans");
    add_decoder(params_, "ans", cfg_.stack(cfg_.depth_answer), active_memories(), r);
  }
}

void MtnModel::set_loss_weights(double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("loss weights must be nonnegative");
  cfg_.alpha = alpha;
  cfg_.beta = beta;
}

std::vector<std::string> MtnModel::active_memories() const {
  std::vector<std::string> mems{"question", "dialog", "caption", "summary"};
  if (cfg_.uses_audio()) mems.push_back("audio");
  if (cfg_.uses_video()) mems.push_back("video");
  return mems;
}

std::vector<std::string> MtnModel::translator_params() const {
  std::vector<std::string> out;
  for (const std::string& name : params_.names())
    if (name.rfind("vct.", 0) == 0 || name.rfind("dst.", 0) == 0) out.push_back(name);
  return out;
}

Tensor MtnModel::encode_text_stream(const std::vector<int>& tokens, const Forward& fw) const {
  if (tokens.empty()) return Tensor(Shape{0, cfg_.d});
  Tensor x = embed(params_, "embed", tokens, cfg_.scale_embed);
  x = add(x, positional_encoding(static_cast<int>(tokens.size()), cfg_.d));
  return apply_dropout(x, fw);
}

Tensor MtnModel::encode_feature_stream(const Tensor& raw, const std::string& modality,
                                       const Forward& fw) const {
  (void)fw;
  const int expected = modality == "video" ? cfg_.d_feat_video : cfg_.d_feat_audio;
  if (raw.rank() != 2 || raw.extent(1) != expected)
    throw ConfigError(msg(modality, " features have shape ", shape_str(raw.shape()),
                          " but the configured width is ", expected));
  Tensor x = relu(linear(params_, "feat." + modality + ".proj", raw));
  x = layer_norm(params_, "feat." + modality + ".norm", x);
  return add(x, positional_encoding(raw.extent(0), cfg_.d));
}

Tensor MtnModel::history_tokens_encoding(const std::vector<int>& flat, const Forward& fw) const {
  Tensor tok = encode_text_stream(flat, fw);
  return encode(params_, "hier", cfg_.stack(cfg_.depth_n), tok, Tensor(), fw);
}

Tensor MtnModel::history_vectors(const std::vector<std::vector<int>>& history,
                                 const Forward& fw) const {
  std::vector<int> flat;
  for (const auto& turn : history) {
    if (turn.empty() || turn.back() != Vocabulary::eos_id)
      throw FormatError("history turn does not end with eos");
    flat.insert(flat.end(), turn.begin(), turn.end());
  }
  if (flat.empty()) return Tensor(Shape{0, cfg_.d});
  Tensor enc = history_tokens_encoding(flat, fw);
  std::vector<int> eos_rows;
  for (size_t i = 0; i < flat.size(); ++i)
    if (flat[i] == Vocabulary::eos_id) eos_rows.push_back(static_cast<int>(i));
  return gather_rows(enc, eos_rows);
}

struct MtnModel::Streams {
  Tensor question, caption, summary;
  Tensor dialog;  // z_hiss or its summary-translated form
  Tensor audio;   // query-aware audio summary
  Tensor video;   // encoded features or their caption-translated form
  Tensor l_c, l_s;
  bool has_l_c = false, has_l_s = false;

  std::vector<Memory> memories() const {
    return {{"question", question, Tensor()}, {"dialog", dialog, Tensor()},
            {"caption", caption, Tensor()},   {"summary", summary, Tensor()},
            {"audio", audio, Tensor()},       {"video", video, Tensor()}};
  }
};

MtnModel::Streams MtnModel::assemble(const ExampleView& ex, const Forward& fw,
                                     bool with_losses) const {
  Streams s;
  s.question = encode_text_stream(ex.question, fw);
  s.caption = encode_text_stream(ex.caption, fw);
  s.summary = encode_text_stream(ex.summary, fw);
  s.audio = Tensor(Shape{0, cfg_.d});
  s.video = Tensor(Shape{0, cfg_.d});

  // Sentence-level history: one pooled vector per turn.
  Tensor z_hiss = history_vectors(ex.history, fw);

  if (cfg_.uses_video()) {
    if (!ex.video) throw ContractError("video features required in video-text mode");
    Tensor f_v = encode_feature_stream(*ex.video, "video", fw);
    if (cfg_.vct_enabled() && cfg_.alpha > 0.0) {
      TmtConfig tc;
      tc.depth = cfg_.depth_m;
      tc.d = cfg_.d;
      tc.heads = cfg_.heads;
      tc.d_ff = cfg_.d_ff;
      tc.embed_table = "embed";
      tc.scale_embed = cfg_.scale_embed;
      TmtTarget target;
      if (with_losses) target.tokens = &ex.caption;
      TmtOutput out = tmt_forward(params_, "vct", tc, f_v, target, fw);
      s.video = out.enhanced_source;
      if (out.has_loss) {
        s.l_c = out.loss;
        s.has_l_c = true;
      }
    } else {
      s.video = f_v;
    }
  }

  if (cfg_.uses_audio()) {
    if (!ex.audio) throw ContractError("audio features required in video-text mode");
    Tensor f_a = encode_feature_stream(*ex.audio, "audio", fw);
    s.audio = decode(params_, "qa", cfg_.stack(cfg_.depth_n), s.question,
                     {{"x", f_a, Tensor()}}, Tensor(), fw);
  }

  if (z_hiss.extent(0) > 0 && cfg_.dst_enabled() && cfg_.beta > 0.0) {
    TmtConfig tc;
    tc.depth = cfg_.depth_n;
    tc.d = cfg_.d;
    tc.heads = cfg_.heads;
    tc.d_ff = cfg_.d_ff;
    tc.embed_table = "embed";
    tc.scale_embed = cfg_.scale_embed;
    TmtTarget target;
    if (with_losses) target.tokens = &ex.summary;
    TmtOutput out = tmt_forward(params_, "dst", tc, z_hiss, target, fw);
    s.dialog = out.enhanced_source;
    if (out.has_loss) {
      s.l_s = out.loss;
      s.has_l_s = true;
    }
  } else {
    s.dialog = z_hiss;
  }
  return s;
}

Tensor MtnModel::answer_logits(const std::vector<int>& answer_prefix,
                               const std::vector<Memory>& mems, const Forward& fw) const {
  const int n = static_cast<int>(answer_prefix.size());
  Tensor x = add(embed(params_, "embed", answer_prefix, cfg_.scale_embed),
                 positional_encoding(n, cfg_.d));
  x = apply_dropout(x, fw);
  Tensor dec = decode(params_, "ans", cfg_.stack(cfg_.depth_answer), x, mems, causal_mask(n),
                      fw);
  return matmul(dec, transpose(params_.use("embed")));
}

Tensor MtnModel::answer_token_logits(const ExampleView& ex, const Forward& fw) const {
  if (ex.answer.empty()) throw ContractError("example has no answer tokens");
  Streams s = assemble(ex, fw, false);
  std::vector<int> prefix(ex.answer.begin(), ex.answer.end() - 1);
  prefix.insert(prefix.begin(), Vocabulary::sos_id);
  return answer_logits(prefix, s.memories(), fw);
}

ExampleLoss MtnModel::forward(const ExampleView& ex, const Forward& fw) const {
  if (ex.answer.empty()) throw ContractError("example has no answer tokens");
  Streams s = assemble(ex, fw, true);

  std::vector<int> prefix(ex.answer.begin(), ex.answer.end() - 1);
  prefix.insert(prefix.begin(), Vocabulary::sos_id);
  Tensor logits = answer_logits(prefix, s.memories(), fw);
  Tensor l_ans = text_target_loss(logits, ex.answer);

  ExampleLoss out;
  out.l_ans = l_ans.item();
  out.tokens = static_cast<int64_t>(ex.answer.size());
  out.nll_sum = out.l_ans * static_cast<double>(out.tokens);
  Tensor l_c = s.has_l_c ? s.l_c : Tensor::scalar(0.0);
  Tensor l_s = s.has_l_s ? s.l_s : Tensor::scalar(0.0);
  out.has_l_c = s.has_l_c;
  out.has_l_s = s.has_l_s;
  out.l_c = l_c.item();
  out.l_s = l_s.item();
  out.total = total_loss(l_ans, l_c, l_s, cfg_.alpha, cfg_.beta);
  return out;
}

BatchLoss MtnModel::forward_batch(const DialogBatch& batch, FeatureLoader* features,
                                  const Forward& fw) const {
  if (batch.size < 1) throw ContractError("empty batch");
  BatchLoss out;
  Tensor sum;
  for (int b = 0; b < batch.size; ++b) {
    ExampleLoss ex = forward(view(batch, b, features), fw);
    sum = b == 0 ? ex.total : add(sum, ex.total);
    out.l_ans += ex.l_ans;
    if (ex.has_l_c) {
      out.l_c += ex.l_c;
      ++out.l_c_count;
    }
    if (ex.has_l_s) {
      out.l_s += ex.l_s;
      ++out.l_s_count;
    }
    out.nll_sum += ex.nll_sum;
    out.tokens += ex.tokens;
  }
  out.total = scale(sum, 1.0 / static_cast<double>(batch.size));
  out.l_ans /= batch.size;
  if (out.l_c_count) out.l_c /= out.l_c_count;
  if (out.l_s_count) out.l_s /= out.l_s_count;
  return out;
}

ExampleView MtnModel::view(const TokenizedExample& ex, FeatureLoader* features) const {
  ExampleView v;
  v.question = ex.question;
  v.answer = ex.answer;
  v.caption = ex.caption;
  v.summary = ex.summary;
  v.history = ex.history;
  if (cfg_.uses_video() || cfg_.uses_audio()) {
    if (!features) throw ContractError("feature loader required in video-text mode");
    if (cfg_.uses_video()) v.video = &features->get("video", ex.dialog_id);
    if (cfg_.uses_audio()) v.audio = &features->get("audio", ex.dialog_id);
  }
  return v;
}

ExampleView MtnModel::view(const DialogBatch& batch, int b, FeatureLoader* features) const {
  ExampleView v;
  v.question = batch.question.unpad(b);
  v.answer = batch.answer.unpad(b);
  v.caption = batch.caption.unpad(b);
  v.summary = batch.summary.unpad(b);
  std::vector<int> flat = batch.history.unpad(b);
  std::vector<int> turn;
  for (int id : flat) {
    turn.push_back(id);
    if (id == Vocabulary::eos_id) {
      v.history.push_back(std::move(turn));
      turn.clear();
    }
  }
  if (!turn.empty()) v.history.push_back(std::move(turn));  // caught later as missing eos
  if (cfg_.uses_video() || cfg_.uses_audio()) {
    if (!features) throw ContractError("feature loader required in video-text mode");
    const std::string& id = batch.dialog_ids.at(static_cast<size_t>(b));
    if (cfg_.uses_video()) v.video = &features->get("video", id);
    if (cfg_.uses_audio()) v.audio = &features->get("audio", id);
  }
  return v;
}

GenResult MtnModel::generate(const ExampleView& ex, DecodeMode mode, int beam_width,
                             int max_len) const {
  if (max_len < 1) throw ContractError(msg("max_len ", max_len, " < 1"));
  if (mode == DecodeMode::beam && beam_width < 1)
    throw ContractError(msg("beam width ", beam_width, " < 1"));
  Forward fw;  // evaluation mode
  Streams s = assemble(ex, fw, false);
  const std::vector<Memory> mems = s.memories();

  struct Beam {
    std::vector<int> ids;  // starts with sos
    double logp = 0.0;
    bool done = false;
  };
  const int width = mode == DecodeMode::greedy ? 1 : beam_width;

  std::vector<Beam> beams{Beam{{Vocabulary::sos_id}, 0.0, false}};
  std::vector<Beam> finished;
  for (int step = 0; step < max_len && !beams.empty(); ++step) {
    struct Cand {
      size_t beam;
      int token;
      double logp;
    };
    std::vector<Cand> cands;
    for (size_t bi = 0; bi < beams.size(); ++bi) {
      Tensor logits = answer_logits(beams[bi].ids, mems, fw);
      Tensor lp = log_softmax(narrow(logits, 0, logits.extent(0) - 1, 1));
      const auto& row = lp.data();
      for (int v = 0; v < static_cast<int>(row.size()); ++v)
        cands.push_back({bi, v, beams[bi].logp + row[static_cast<size_t>(v)]});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.token < b.token;
    });
    std::vector<Beam> next;
    int taken = 0;
    for (const Cand& c : cands) {
      if (taken >= width) break;
      ++taken;
      Beam nb = beams[c.beam];
      nb.ids.push_back(c.token);
      nb.logp = c.logp;
      if (c.token == Vocabulary::eos_id) {
        nb.done = true;
        finished.push_back(std::move(nb));
      } else {
        next.push_back(std::move(nb));
      }
    }
    beams = std::move(next);
    if (static_cast<int>(finished.size()) >= width) break;
  }

  auto norm_score = [](const Beam& b) {
    const double len = static_cast<double>(b.ids.size() - 1);
    return len > 0 ? b.logp / len : -1e300;
  };
  const Beam* best = nullptr;
  bool best_done = false;
  for (const Beam& b : finished)
    if (!best || norm_score(b) > norm_score(*best)) {
      best = &b;
      best_done = true;
    }
  if (!best)
    for (const Beam& b : beams)
      if (!best || norm_score(b) > norm_score(*best)) best = &b;
  if (!best) throw StateError("decoding produced no candidates");

  GenResult out;
  out.tokens.assign(best->ids.begin() + 1, best->ids.end());
  out.truncated = !best_done;
  out.score = norm_score(*best);
  return out;
}

}  // namespace tmt
