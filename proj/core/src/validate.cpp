#include "tmt/validate.hpp"

#include "tmt/grad_check.hpp"
#include "tmt/model.hpp"
#include "tmt/synthetic.hpp"
#include "tmt/translator.hpp"

namespace tmt {

namespace {

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-5;
constexpr int kCoordsPerParam = 24;

Tensor randn(Shape shape, Rng& rng, double scale = 0.7) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& x : t.mutable_data()) x = scale * rng.normal();
  return t;
}

ValidationCase run_case(std::string name, ParamStore& store, const LossFn& loss, uint64_t seed) {
  GradCheckReport rpt;
  grad_check_store(store, loss, kStep, &rpt, kCoordsPerParam, derive_seed(seed, name));
  ValidationCase c;
  c.name = std::move(name);
  c.max_rel_err = rpt.max_rel_err;
  c.tolerance = kTol;
  c.pass = rpt.max_rel_err < kTol;
  return c;
}

/// Perturbs every registered parameter. Identity-like initializations
/// (unit gains, zero shifts) make simple probe losses nearly invariant,
/// which would leave only noise-scale gradients to compare.
void jitter_all(ParamStore& s, Rng& r, double scale = 0.25) {
  for (const auto& name : s.names())
    for (auto& x : s.raw(name).mutable_data()) x += scale * r.normal();
}

/// Squared distance to a fixed random anchor; keeps gradients O(1) even
/// through normalizing layers.
Tensor anchored(const Tensor& y, const Tensor& target) {
  Tensor d = sub(y, target);
  return mean_all(mul(d, d));
}

}  // namespace

std::vector<ValidationCase> grad_check_layers(uint64_t seed) {
  std::vector<ValidationCase> out;

  {
    ParamStore s;
    Rng r(derive_seed(seed, "linear"));
    s.add("x", randn({3, 4}, r));
    add_linear(s, "lin", 4, 5, r);
    jitter_all(s, r);
    Tensor t = randn({3, 5}, r);
    auto loss = [&s, t] { return anchored(linear(s, "lin", s.use("x")), t); };
    out.push_back(run_case("linear", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "layer_norm"));
    s.add("x", randn({4, 6}, r));
    add_layer_norm(s, "ln", 6);
    jitter_all(s, r);
    Tensor t = randn({4, 6}, r);
    auto loss = [&s, t] { return anchored(layer_norm(s, "ln", s.use("x")), t); };
    out.push_back(run_case("layer_norm", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "embed"));
    s.add("tbl", randn({7, 6}, r));
    const std::vector<int> ids{1, 3, 6, 3, 0};  // repeated row: accumulation path
    Tensor t = randn({5, 6}, r);
    auto loss = [&s, ids, t] { return anchored(embed(s, "tbl", ids, true), t); };
    out.push_back(run_case("embed", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "attention"));
    s.add("q", randn({3, 4}, r));
    s.add("k", randn({5, 4}, r));
    s.add("v", randn({5, 4}, r));
    Tensor mask = Tensor::zeros({3, 5});
    mask.mutable_data()[3] = kMaskBlock;  // row 0: partial block
    mask.mutable_data()[4] = kMaskBlock;
    for (int j = 0; j < 5; ++j) mask.mutable_data()[2 * 5 + j] = kMaskBlock;  // row 2: all blocked
    Tensor t = randn({3, 4}, r);
    auto loss = [&s, mask, t] {
      return anchored(scaled_dot_attention(s.use("q"), s.use("k"), s.use("v"), mask, Forward{}),
                      t);
    };
    out.push_back(run_case("scaled_dot_attention", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "multi_head"));
    s.add("xq", randn({3, 8}, r));
    s.add("xkv", randn({4, 8}, r));
    add_multi_head(s, "mh", 8, r);
    jitter_all(s, r);
    Tensor mask = pad_mask({1, 1, 1, 0}, 3);
    Tensor t = randn({3, 8}, r);
    auto loss = [&s, mask, t] {
      return anchored(multi_head_attention(s, "mh", s.use("xq"), s.use("xkv"), 2, mask, Forward{}),
                      t);
    };
    out.push_back(run_case("multi_head_attention", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "ffn"));
    s.add("x", randn({3, 6}, r));
    add_ffn(s, "ff", 6, 12, r);
    jitter_all(s, r);
    Tensor t = randn({3, 6}, r);
    auto loss = [&s, t] { return anchored(ffn(s, "ff", s.use("x")), t); };
    out.push_back(run_case("ffn", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "encoder"));
    StackConfig cfg{2, 8, 2, 16};
    s.add("x", randn({4, 8}, r));
    add_encoder(s, "enc", cfg, r);
    jitter_all(s, r);
    Tensor t = randn({4, 8}, r);
    auto loss = [&s, cfg, t] {
      return anchored(encode(s, "enc", cfg, s.use("x"), Tensor(), Forward{}), t);
    };
    out.push_back(run_case("encoder", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "decoder"));
    StackConfig cfg{1, 8, 2, 16};
    s.add("x", randn({3, 8}, r));
    s.add("mem", randn({4, 8}, r));
    add_decoder(s, "dec", cfg, {"m"}, r);
    jitter_all(s, r);
    Tensor t = randn({3, 8}, r);
    auto loss = [&s, cfg, t] {
      std::vector<Memory> mems{{"m", s.use("mem"), Tensor()}};
      return anchored(decode(s, "dec", cfg, s.use("x"), mems, causal_mask(3), Forward{}), t);
    };
    out.push_back(run_case("decoder", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "text_loss"));
    s.add("x", randn({4, 6}, r));
    s.add("tbl", randn({9, 6}, r));
    const std::vector<int> targets{4, 7, 3, 0};
    const std::vector<char> keep{1, 1, 1, 0};
    auto loss = [&s, targets, keep] {
      Tensor logits = matmul(s.use("x"), transpose(s.use("tbl")));
      return text_target_loss(logits, targets, &keep);
    };
    out.push_back(run_case("text_target_loss", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "tmt_text"));
    TmtConfig tc;
    tc.depth = 1;
    tc.d = 8;
    tc.heads = 2;
    tc.d_ff = 16;
    tc.target_kind = TargetKind::text;
    tc.embed_table = "emb";
    s.add("emb", randn({9, 8}, r));
    add_tmt(s, "vct", tc, r);
    s.add("src", randn({5, 8}, r));
    jitter_all(s, r);
    const std::vector<int> tokens{4, 5, 6, 3};
    auto loss = [&s, tc, tokens] {
      TmtTarget t;
      t.tokens = &tokens;
      return tmt_forward(s, "vct", tc, s.use("src"), t, Forward{}).loss;
    };
    out.push_back(run_case("translator_text", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "tmt_l1"));
    TmtConfig tc;
    tc.depth = 1;
    tc.d = 8;
    tc.heads = 2;
    tc.d_ff = 16;
    tc.target_kind = TargetKind::dense;
    tc.dense_loss = DenseLossKind::l1;
    add_tmt(s, "dm", tc, r);
    s.add("src", randn({5, 8}, r));
    jitter_all(s, r);
    Tensor target = randn({4, 8}, r);
    auto loss = [&s, tc, target] {
      TmtTarget t;
      t.dense = &target;
      return tmt_forward(s, "dm", tc, s.use("src"), t, Forward{}).loss;
    };
    out.push_back(run_case("translator_dense_l1", s, loss, seed));
  }
  {
    ParamStore s;
    Rng r(derive_seed(seed, "tmt_sim"));
    TmtConfig tc;
    tc.depth = 1;
    tc.d = 8;
    tc.heads = 2;
    tc.d_ff = 16;
    tc.target_kind = TargetKind::dense;
    tc.dense_loss = DenseLossKind::similarity;
    add_tmt(s, "ds", tc, r);
    s.add("src", randn({5, 8}, r));
    jitter_all(s, r);
    Tensor target = randn({4, 8}, r);
    for (int j = 0; j < 8; ++j) target.mutable_data()[2 * 8 + j] = 0.0;  // dead-row branch
    auto loss = [&s, tc, target] {
      TmtTarget t;
      t.dense = &target;
      return tmt_forward(s, "ds", tc, s.use("src"), t, Forward{}).loss;
    };
    out.push_back(run_case("translator_dense_similarity", s, loss, seed));
  }

  return out;
}

ValidationCase grad_check_model(uint64_t seed) {
  SyntheticSpec sp;
  sp.dialogs = 2;
  sp.turns = 2;
  sp.actions = 4;
  sp.actions_per_dialog = 2;
  sp.frames_per_action = 1;
  sp.d_feat = 4;
  sp.noise = 0.05;
  sp.seed = derive_seed(seed, "data");
  SyntheticData data = generate_synthetic_data(sp);

  std::vector<std::string> texts;
  for (const auto& d : data.dialogs) {
    texts.push_back(d.caption);
    texts.push_back(d.summary);
    for (const auto& t : d.turns) {
      texts.push_back(t.question);
      texts.push_back(t.answer);
    }
  }
  Vocabulary vocab = Vocabulary::build(texts, 1);
  auto examples = expand_examples(data.dialogs, vocab);
  // First two examples are dialog 0's turns: one without history, one with.
  std::vector<TokenizedExample> pair(examples.begin(), examples.begin() + 2);
  auto batches = batch_and_pad(pair, 2);

  FeatureLoader features{DatasetManifest{}};
  for (const auto& [id, t] : data.video) features.put("video", id, t);
  for (const auto& [id, t] : data.audio) features.put("audio", id, t);

  ModelConfig mc;
  mc.d = 8;
  mc.heads = 2;
  mc.d_ff = 16;
  mc.depth_m = 1;
  mc.depth_n = 1;
  mc.depth_answer = 1;
  mc.vocab = vocab.size();
  mc.d_feat_video = sp.d_feat;
  mc.d_feat_audio = sp.d_feat;
  mc.alpha = 0.3;
  mc.beta = 0.8;
  mc.task = TaskMode::video_text;
  MtnModel model(mc, derive_seed(seed, "model"));

  auto loss = [&] { return model.forward_batch(batches[0], &features, Forward{}).total; };
  GradCheckReport rpt;
  grad_check_store(model.params(), loss, kStep, &rpt, 6, derive_seed(seed, "sample"));
  ValidationCase c;
  c.name = "full_model_loss";
  c.max_rel_err = rpt.max_rel_err;
  c.tolerance = kTol;
  c.pass = rpt.max_rel_err < kTol;
  return c;
}

}  // namespace tmt
