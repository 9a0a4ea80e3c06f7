#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "tmt/error.hpp"
#include "tmt/synthetic.hpp"
#include "tmt/tnsr.hpp"
#include "tmt/train.hpp"

using namespace tmt;
using testutil::bitwise_equal;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

struct Corpus {
  Vocabulary vocab;
  std::vector<TokenizedExample> train, dev;
};

Corpus text_corpus(int dialogs, int turns, uint64_t seed, int dev_dialogs = 0) {
  SyntheticSpec spec;
  spec.dialogs = dialogs + dev_dialogs;
  spec.turns = turns;
  spec.seed = seed;
  SyntheticData data = generate_synthetic_data(spec);
  std::vector<std::string> texts;
  for (const DialogRecord& d : data.dialogs) {
    texts.push_back(d.caption);
    texts.push_back(d.summary);
    for (const DialogTurn& t : d.turns) {
      texts.push_back(t.question);
      texts.push_back(t.answer);
    }
  }
  Corpus c{Vocabulary::build(texts, 1), {}, {}};
  std::vector<DialogRecord> train_recs(data.dialogs.begin(), data.dialogs.begin() + dialogs);
  std::vector<DialogRecord> dev_recs(data.dialogs.begin() + dialogs, data.dialogs.end());
  c.train = expand_examples(train_recs, c.vocab);
  c.dev = dev_dialogs > 0 ? expand_examples(dev_recs, c.vocab) : c.train;
  return c;
}

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.ffn = 16;
  cfg.depth_m = 1;
  cfg.depth_n = 1;
  cfg.depth_answer = 1;
  cfg.keep_prob = 1.0;
  cfg.batch = 4;
  cfg.epochs = 2;
  cfg.warmup = 20;
  cfg.alpha = 0.3;
  cfg.beta = 0.8;
  cfg.task = "text-only";
  cfg.seed = 11;
  return cfg;
}

MtnModel tiny_model(const Corpus& c, const RunConfig& cfg) {
  return MtnModel(cfg.model_config(c.vocab.size(), 0, 0), cfg.seed);
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("the warmup schedule matches its closed form") {
  // Rising branch proportional to the step, falling branch to step^-1/2.
  CHECK(noam_lr(10, 128, 400) < noam_lr(20, 128, 400));
  CHECK(noam_lr(400, 128, 400) > noam_lr(800, 128, 400));
  CHECK(std::abs(noam_lr(13000, 128, 13000) - 0.000775) < 1e-6);

  // Both branches agree at the warmup corner.
  const double at = noam_lr(400, 128, 400);
  const double before = noam_lr(399, 128, 400);
  const double after = noam_lr(401, 128, 400);
  CHECK(at > before);
  CHECK(at > after);
  const double direct =
      std::pow(128.0, -0.5) * std::min(std::pow(400.0, -0.5), 400.0 * std::pow(400.0, -1.5));
  CHECK(std::abs(at - direct) <= 1e-15);

  CHECK_THROWS_AS((void)noam_lr(0, 128, 400), ContractError);
  CHECK_THROWS_AS((void)noam_lr(-3, 128, 400), ContractError);
  CHECK_THROWS_AS((void)noam_lr(5, 128, 0), ContractError);
  CHECK_THROWS_AS((void)noam_lr(5, 0, 400), ConfigError);
}

TEST_CASE("the first optimizer step moves by the learning rate against the sign") {
  ParamStore params;
  params.add("p", Tensor(Shape{3}, {1.0, -2.0, 0.5}));
  std::map<std::string, Tensor> grads;
  grads.emplace("p", Tensor(Shape{3}, {0.5, -0.25, 3.0}));
  AdamState state;
  adam_step(params, grads, state, 0.1);
  CHECK(state.t == 1);
  const Tensor& p = params.raw("p");
  CHECK(std::abs(p.at({0}) - (1.0 - 0.1)) < 1e-8);
  CHECK(std::abs(p.at({1}) - (-2.0 + 0.1)) < 1e-8);
  CHECK(std::abs(p.at({2}) - (0.5 - 0.1)) < 1e-8);
}

TEST_CASE("parameters without gradients stay bitwise untouched") {
  ParamStore params;
  Rng rng(101);
  params.add("used", random_tensor({2, 2}, rng));
  params.add("idle", random_tensor({3}, rng));
  Tensor idle_before = params.raw("idle").detached();
  std::map<std::string, Tensor> grads;
  grads.emplace("used", random_tensor({2, 2}, rng));
  AdamState state;
  for (int i = 0; i < 5; ++i) adam_step(params, grads, state, 0.01);
  CHECK(bitwise_equal(params.raw("idle"), idle_before));
  CHECK_FALSE(bitwise_equal(params.raw("used"), grads.at("used")));

  std::map<std::string, Tensor> unknown;
  unknown.emplace("ghost", Tensor(Shape{1}));
  CHECK_THROWS_AS(adam_step(params, unknown, state, 0.01), ConformanceError);
}

TEST_CASE("the optimizer follows the scalar recurrence exactly") {
  Rng rng(102);
  std::vector<double> gs;
  for (int i = 0; i < 100; ++i) gs.push_back(rng.uniform(-2.0, 2.0));

  ParamStore params;
  params.add("w", Tensor(Shape{1}, {0.7}));
  AdamState state;
  for (double g : gs) {
    std::map<std::string, Tensor> grads;
    grads.emplace("w", Tensor(Shape{1}, {g}));
    adam_step(params, grads, state, 0.05);
  }

  oracle::AdamTrace trace = oracle::adam_scalar(0.7, gs, 0.05, 0.9, 0.98, 1e-9);
  CHECK(std::abs(params.raw("w").at({0}) - trace.theta) <= 1e-12);
  CHECK(std::abs(state.m.at("w").at({0}) - trace.m) <= 1e-12);
  CHECK(std::abs(state.v.at("w").at({0}) - trace.v) <= 1e-12);
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  std::map<std::string, Tensor> grads;
  grads.emplace("a", Tensor(Shape{2}, {3.0, 0.0}));
  grads.emplace("b", Tensor(Shape{1}, {4.0}));
  const double norm = clip_gradients(grads, 1.0);
  CHECK(norm == 5.0);
  CHECK(std::abs(grads.at("a").at({0}) - 0.6) <= 1e-15);
  CHECK(std::abs(grads.at("b").at({0}) - 0.8) <= 1e-15);

  std::map<std::string, Tensor> small;
  small.emplace("a", Tensor(Shape{2}, {0.3, -0.4}));
  Tensor before = small.at("a").detached();
  CHECK(clip_gradients(small, 10.0) == 0.5);
  CHECK(bitwise_equal(small.at("a"), before));

  CHECK_THROWS_AS((void)clip_gradients(small, 0.0), ConfigError);
  CHECK_THROWS_AS((void)clip_gradients(small, -1.0), ConfigError);
  std::map<std::string, Tensor> bad;
  bad.emplace("a", Tensor(Shape{1}, {std::numeric_limits<double>::infinity()}));
  CHECK_THROWS_AS((void)clip_gradients(bad, 1.0), NumericError);
}

TEST_CASE("loss weights decay along the exact decimal trace") {
  auto at = [](int epoch) { return weight_decay_schedule(0.3, 0.8, epoch); };
  CHECK(at(0) == std::pair<double, double>{0.3, 0.8});
  CHECK(at(5) == std::pair<double, double>{0.3, 0.8});
  CHECK(at(9) == std::pair<double, double>{0.3, 0.8});
  CHECK(at(10) == std::pair<double, double>{0.27, 0.72});
  CHECK(at(19) == std::pair<double, double>{0.27, 0.72});
  CHECK(at(20) == std::pair<double, double>{0.243, 0.648});
  CHECK(at(30) == std::pair<double, double>{0.2187, 0.5832});
  CHECK(weight_decay_schedule(0.0, 0.5, 10) == std::pair<double, double>{0.0, 0.45});
  CHECK_THROWS_AS((void)weight_decay_schedule(0.3, 0.8, -1), ContractError);
}

TEST_CASE("sample statistics use the n-minus-one denominator") {
  MeanStd ms = mean_std({2.0, 4.0});
  CHECK(ms.mean == 3.0);
  CHECK(std::abs(ms.stddev - std::sqrt(2.0)) <= 1e-15);
  CHECK(ms.n == 2);

  ms = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(ms.mean == 2.5);
  CHECK(std::abs(ms.stddev - std::sqrt(5.0 / 3.0)) <= 1e-15);

  ms = mean_std({7.5});
  CHECK(ms.mean == 7.5);
  CHECK(ms.stddev == 0.0);
  CHECK(ms.n == 1);

  ms = mean_std({});
  CHECK(ms.n == 0);
}

TEST_CASE("an all-zero model prices every answer token uniformly") {
  Corpus c = text_corpus(4, 2, 31);
  RunConfig cfg = tiny_run();
  MtnModel model = tiny_model(c, cfg);
  for (const std::string& name : model.params().names())
    model.params().raw(name) = Tensor(model.params().raw(name).shape());
  const double v = static_cast<double>(c.vocab.size());
  const double ppl = perplexity_eval(model, c.train, nullptr, cfg.batch);
  CHECK(std::abs(ppl - v) <= 1e-9 * v);
}

TEST_CASE("perplexity is the exponential of the pooled token nll") {
  Corpus c = text_corpus(4, 2, 32);
  RunConfig cfg = tiny_run();
  MtnModel model = tiny_model(c, cfg);
  DevEval de = dev_eval(model, c.train, nullptr, cfg.batch);
  double nll = 0.0;
  int64_t tokens = 0;
  for (const TokenizedExample& te : c.train) {
    ExampleLoss one = model.forward(model.view(te, nullptr), Forward{});
    nll += one.nll_sum;
    tokens += one.tokens;
  }
  const double pooled = nll / static_cast<double>(tokens);
  CHECK(std::abs(de.loss - pooled) <= 1e-10);
  CHECK(de.ppl == std::exp(de.loss));
  CHECK_THROWS_AS((void)dev_eval(model, {}, nullptr, 4), ContractError);
}

TEST_CASE("zero-epoch training returns only the run header") {
  Corpus c = text_corpus(2, 1, 33);
  RunConfig cfg = tiny_run();
  cfg.epochs = 0;
  MtnModel model = tiny_model(c, cfg);
  RunRecord rec = train_model(model, cfg, c.train, c.train, nullptr, nullptr, "");
  CHECK(rec.seed == cfg.seed);
  CHECK(rec.config_text == cfg.to_text());
  CHECK(rec.epochs.empty());
  CHECK(rec.best_epoch == -1);

  cfg.epochs = 1;
  CHECK_THROWS_AS((void)train_model(model, cfg, {}, c.train, nullptr, nullptr, ""),
                  ContractError);
}

TEST_CASE("same-seed training runs produce identical traces") {
  Corpus c = text_corpus(4, 2, 34, 2);
  RunConfig cfg = tiny_run();
  cfg.epochs = 3;
  cfg.keep_prob = 0.9;  // exercise the seeded dropout stream too

  auto run = [&]() {
    MtnModel model = tiny_model(c, cfg);
    return train_model(model, cfg, c.train, c.dev, nullptr, nullptr, "");
  };
  RunRecord a = run();
  RunRecord b = run();
  REQUIRE(a.epochs.size() == 3);
  REQUIRE(b.epochs.size() == 3);
  for (size_t e = 0; e < a.epochs.size(); ++e) {
    CHECK(a.epochs[e].train_loss == b.epochs[e].train_loss);
    CHECK(a.epochs[e].l_ans == b.epochs[e].l_ans);
    CHECK(a.epochs[e].l_c == b.epochs[e].l_c);
    CHECK(a.epochs[e].l_s == b.epochs[e].l_s);
    CHECK(a.epochs[e].dev_loss == b.epochs[e].dev_loss);
    CHECK(a.epochs[e].dev_ppl == b.epochs[e].dev_ppl);
    CHECK(a.epochs[e].lr == b.epochs[e].lr);
  }
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(a.best_dev_ppl == b.best_dev_ppl);

  RunConfig other = cfg;
  other.seed = cfg.seed + 1;
  MtnModel om = tiny_model(c, other);
  RunRecord o = train_model(om, other, c.train, c.dev, nullptr, nullptr, "");
  CHECK(o.epochs[2].train_loss != a.epochs[2].train_loss);
}

TEST_CASE("the saved checkpoint reproduces the recorded dev loss") {
  TempDir dir;
  Corpus c = text_corpus(4, 2, 35, 2);
  RunConfig cfg = tiny_run();
  cfg.epochs = 3;
  const std::string ckpt = dir.file("best.ckpt");
  MtnModel model = tiny_model(c, cfg);
  RunRecord rec = train_model(model, cfg, c.train, c.dev, nullptr, nullptr, ckpt);
  REQUIRE(rec.best_epoch >= 0);
  REQUIRE(rec.checkpoint == ckpt);

  MtnModel restored = tiny_model(c, cfg);
  checkpoint_load(ckpt, restored.params());
  DevEval de = dev_eval(restored, c.dev, nullptr, cfg.batch);
  CHECK(de.loss == rec.epochs[static_cast<size_t>(rec.best_epoch)].dev_loss);
  CHECK(de.ppl == rec.best_dev_ppl);
}

TEST_CASE("run records survive the trip through their file format") {
  TempDir dir;
  Corpus c = text_corpus(3, 2, 36, 1);
  RunConfig cfg = tiny_run();
  MtnModel model = tiny_model(c, cfg);
  RunRecord rec =
      train_model(model, cfg, c.train, c.dev, nullptr, nullptr, dir.file("m.ckpt"));
  const std::string path = dir.file("run.jsonl");
  rec.save(path);
  RunRecord back = RunRecord::load(path);
  CHECK(back.seed == rec.seed);
  CHECK(back.config_text == rec.config_text);
  CHECK(back.best_epoch == rec.best_epoch);
  CHECK(back.best_dev_ppl == rec.best_dev_ppl);
  CHECK(back.checkpoint == rec.checkpoint);
  REQUIRE(back.epochs.size() == rec.epochs.size());
  for (size_t e = 0; e < rec.epochs.size(); ++e) {
    CHECK(back.epochs[e].epoch == rec.epochs[e].epoch);
    CHECK(back.epochs[e].train_loss == rec.epochs[e].train_loss);
    CHECK(back.epochs[e].dev_ppl == rec.epochs[e].dev_ppl);
    CHECK(back.epochs[e].lr == rec.epochs[e].lr);
    CHECK(back.epochs[e].alpha == rec.epochs[e].alpha);
  }
  CHECK_THROWS_AS((void)RunRecord::load(dir.file("absent.jsonl")), FormatError);
}

TEST_CASE("silencing both translators starves them of gradient") {
  Corpus c = text_corpus(3, 2, 37);
  RunConfig cfg = tiny_run();
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  MtnModel model = tiny_model(c, cfg);
  REQUIRE_FALSE(model.translator_params().empty());

  // A history-bearing example so the summary branch would run if enabled.
  const TokenizedExample* with_history = nullptr;
  for (const TokenizedExample& te : c.train)
    if (!te.history.empty()) with_history = &te;
  REQUIRE(with_history != nullptr);

  Tape tape;
  ExampleLoss loss = model.forward(model.view(*with_history, nullptr), Forward{});
  GradStore gs = tape.backward(loss.total);
  auto grads = collect_grads(model.params(), gs);
  CHECK_FALSE(grads.empty());
  for (const std::string& name : model.translator_params())
    CHECK(grads.count(name) == 0);

  // Control: with live weights the summary translator does get gradient.
  cfg.beta = 0.8;
  MtnModel live = tiny_model(c, cfg);
  Tape tape2;
  ExampleLoss loss2 = live.forward(live.view(*with_history, nullptr), Forward{});
  GradStore gs2 = tape2.backward(loss2.total);
  auto grads2 = collect_grads(live.params(), gs2);
  bool any_translator = false;
  for (const std::string& name : live.translator_params())
    if (grads2.count(name)) any_translator = true;
  CHECK(any_translator);
}

TEST_CASE("non-finite training losses are reported, not propagated") {
  Corpus c = text_corpus(3, 2, 38);
  RunConfig cfg = tiny_run();
  cfg.epochs = 1;

  // Overflowing loss weights make the total infinite on the first batch.
  ModelConfig mc = cfg.model_config(c.vocab.size(), 0, 0);
  mc.alpha = 1e308;
  mc.beta = 1e308;
  MtnModel model(mc, cfg.seed);
  CHECK_THROWS_WITH_AS(
      (void)train_model(model, cfg, c.train, c.train, nullptr, nullptr, ""),
      doctest::Contains("epoch 0"), NumericError);

  // A poisoned parameter blows up inside the forward pass instead. The eos
  // row is embedded by every stream, so the overflow is guaranteed to flow.
  MtnModel poisoned = tiny_model(c, cfg);
  poisoned.params().raw("embed").mutable_data()[3 * 8] = 1e308;
  CHECK_THROWS_AS(
      (void)train_model(poisoned, cfg, c.train, c.train, nullptr, nullptr, ""),
      NumericError);
}

TEST_CASE("the grid search is exhaustive, ordered, and order-invariant") {
  Corpus c = text_corpus(4, 2, 39, 2);
  RunConfig base = tiny_run();
  base.epochs = 2;

  GridResult r = grid_search(base, {0.3, 0.0}, {0.8, 0.0}, c.vocab.size(), 0, 0, c.train,
                             c.dev, nullptr, nullptr, 2);
  REQUIRE(r.points.size() == 4);
  CHECK(r.points[0].alpha == 0.0);
  CHECK(r.points[0].beta == 0.0);
  CHECK(r.points[3].alpha == 0.3);
  CHECK(r.points[3].beta == 0.8);
  for (const GridPoint& p : r.points) {
    CHECK(p.best_epoch >= 0);
    CHECK(p.best_dev_ppl > 0.0);
  }

  double best = r.points[0].best_dev_ppl;
  for (const GridPoint& p : r.points) best = std::min(best, p.best_dev_ppl);
  bool winner_found = false;
  for (const GridPoint& p : r.points)
    if (p.alpha == r.best_alpha && p.beta == r.best_beta) {
      winner_found = true;
      CHECK(p.best_dev_ppl == best);
    }
  CHECK(winner_found);

  // Enumeration order and thread count change nothing.
  GridResult r2 = grid_search(base, {0.0, 0.3}, {0.0, 0.8}, c.vocab.size(), 0, 0, c.train,
                              c.dev, nullptr, nullptr, 1);
  REQUIRE(r2.points.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(r2.points[i].alpha == r.points[i].alpha);
    CHECK(r2.points[i].beta == r.points[i].beta);
    CHECK(r2.points[i].best_dev_ppl == r.points[i].best_dev_ppl);
    CHECK(r2.points[i].seed == r.points[i].seed);
  }
  CHECK(r2.best_alpha == r.best_alpha);
  CHECK(r2.best_beta == r.best_beta);

  CHECK_THROWS_AS((void)grid_search(base, {}, {0.8}, c.vocab.size(), 0, 0, c.train, c.dev,
                                    nullptr, nullptr, 1),
                  ContractError);
  CHECK_THROWS_AS((void)grid_search(base, {-0.1}, {0.8}, c.vocab.size(), 0, 0, c.train,
                                    c.dev, nullptr, nullptr, 1),
                  ConfigError);
}

TEST_CASE("weight decay during training restores the base weights after") {
  Corpus c = text_corpus(3, 2, 40);
  RunConfig cfg = tiny_run();
  cfg.epochs = 12;
  cfg.decay_weights = true;
  MtnModel model = tiny_model(c, cfg);
  RunRecord rec = train_model(model, cfg, c.train, c.train, nullptr, nullptr, "");
  REQUIRE(rec.epochs.size() == 12);
  CHECK(rec.epochs[0].alpha == 0.3);
  CHECK(rec.epochs[9].alpha == 0.3);
  CHECK(rec.epochs[10].alpha == 0.27);
  CHECK(rec.epochs[10].beta == 0.72);
  CHECK(rec.epochs[11].alpha == 0.27);
  CHECK(model.config().alpha == 0.3);
  CHECK(model.config().beta == 0.8);
}

TEST_SUITE_END();
