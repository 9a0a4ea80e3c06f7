#include <doctest.h>

#include "helpers.hpp"
#include "tmt/error.hpp"
#include "tmt/grad_check.hpp"
#include "tmt/transformer.hpp"

using namespace tmt;
using testutil::bitwise_equal;
using testutil::jitter_params;
using testutil::random_tensor;

namespace {

Tensor anchored_loss(const Tensor& y, uint64_t seed) {
  Rng rng(seed);
  Tensor t(y.shape());
  for (double& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  Tensor d = sub(y, t);
  return mean_all(mul(d, d));
}

}  // namespace

TEST_SUITE_BEGIN("transformer");

TEST_CASE("a depth-zero encoder is the identity") {
  ParamStore store;
  Rng rng(31);
  StackConfig cfg{0, 6, 2, 12};
  add_encoder(store, "enc", cfg, rng);
  CHECK(store.size() == 0);
  Tensor x = random_tensor({4, 6}, rng);
  CHECK(bitwise_equal(encode(store, "enc", cfg, x, Tensor(Shape{0}), Forward{}), x));
}

TEST_CASE("the encoder keeps sequence length and width") {
  ParamStore store;
  Rng rng(32);
  StackConfig cfg{2, 8, 2, 16};
  add_encoder(store, "enc", cfg, rng);
  Tensor x = random_tensor({5, 8}, rng);
  Tensor y = encode(store, "enc", cfg, x, Tensor(Shape{0}), Forward{});
  CHECK(y.shape() == Shape{5, 8});
  CHECK(y.all_finite());
}

TEST_CASE("encoding an empty source is rejected") {
  ParamStore store;
  Rng rng(33);
  StackConfig cfg{1, 6, 2, 12};
  add_encoder(store, "enc", cfg, rng);
  CHECK_THROWS_WITH_AS(
      (void)encode(store, "enc", cfg, Tensor(Shape{0, 6}), Tensor(Shape{0}), Forward{}),
      doctest::Contains("empty"), ContractError);
  CHECK_THROWS_AS(
      (void)encode(store, "enc", cfg, Tensor(Shape{6}), Tensor(Shape{0}), Forward{}),
      ConformanceError);
}

TEST_CASE("seeded dropout makes training replays bit-identical") {
  ParamStore store;
  Rng rng(34);
  StackConfig cfg{2, 8, 2, 16};
  add_encoder(store, "enc", cfg, rng);
  Tensor x = random_tensor({5, 8}, rng);
  auto run = [&]() {
    Rng dr(999);
    Forward fw{true, 0.8, &dr};
    return encode(store, "enc", cfg, x, Tensor(Shape{0}), fw);
  };
  Tensor a = run();
  Tensor b = run();
  CHECK(bitwise_equal(a, b));
  Rng other(1000);
  Forward fw{true, 0.8, &other};
  CHECK_FALSE(bitwise_equal(encode(store, "enc", cfg, x, Tensor(Shape{0}), fw), a));
}

TEST_CASE("two stacked single layers equal one two-layer stack") {
  Rng rng(35);
  StackConfig one{1, 8, 2, 16};
  StackConfig two{2, 8, 2, 16};
  ParamStore stacked;
  add_encoder(stacked, "st", two, rng);

  // Same parameters, split across two depth-one stacks.
  ParamStore s1, s2;
  Rng dummy(0);
  add_encoder(s1, "s1", one, dummy);
  add_encoder(s2, "s2", one, dummy);
  for (const std::string& name : stacked.names()) {
    const std::string tail = name.substr(3);  // after "st."
    if (tail.rfind("l0.", 0) == 0)
      s1.raw("s1." + tail) = stacked.raw(name).detached();
    else
      s2.raw("s2.l0." + tail.substr(3)) = stacked.raw(name).detached();
  }

  Tensor x = random_tensor({4, 8}, rng);
  Tensor composed =
      encode(s2, "s2", one, encode(s1, "s1", one, x, Tensor(Shape{0}), Forward{}),
             Tensor(Shape{0}), Forward{});
  Tensor direct = encode(stacked, "st", two, x, Tensor(Shape{0}), Forward{});
  CHECK(bitwise_equal(composed.detached(), direct.detached()));
}

TEST_CASE("pad-masked source rows cannot influence the kept rows") {
  ParamStore store;
  Rng rng(36);
  StackConfig cfg{2, 8, 2, 16};
  add_encoder(store, "enc", cfg, rng);
  Tensor x = random_tensor({5, 8}, rng);
  Tensor pad = pad_mask({1, 1, 1, 1, 0}, 5);
  Tensor base = encode(store, "enc", cfg, x, pad, Forward{});

  Tensor x2 = x.detached();
  for (int j = 0; j < 8; ++j) x2.mutable_data()[4 * 8 + j] = 50.0 - j;
  Tensor moved = encode(store, "enc", cfg, x2, pad, Forward{});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j) CHECK(moved.at({i, j}) == base.at({i, j}));
}

TEST_CASE("decoder self-attention is causal at every depth") {
  Rng rng(37);
  for (int depth = 1; depth <= 3; ++depth) {
    ParamStore store;
    StackConfig cfg{depth, 8, 2, 16};
    add_decoder(store, "dec", cfg, {"src"}, rng);
    Tensor memory_seq = random_tensor({4, 8}, rng);
    std::vector<Memory> mems{{"src", memory_seq, Tensor(Shape{0})}};
    const int t = 5;
    Tensor y = random_tensor({t, 8}, rng);
    Tensor base = decode(store, "dec", cfg, y, mems, causal_mask(t), Forward{});

    Tensor y2 = y.detached();
    for (int j = 0; j < 8; ++j) y2.mutable_data()[(t - 1) * 8 + j] *= -3.0;
    Tensor moved = decode(store, "dec", cfg, y2, mems, causal_mask(t), Forward{});
    for (int i = 0; i < t - 1; ++i)
      for (int j = 0; j < 8; ++j) {
        INFO("depth ", depth, " row ", i, " col ", j);
        CHECK(moved.at({i, j}) == base.at({i, j}));
      }
    CHECK_FALSE(bitwise_equal(moved, base));
  }
}

TEST_CASE("pad-masked memory rows cannot influence the decoder") {
  ParamStore store;
  Rng rng(38);
  StackConfig cfg{2, 8, 2, 16};
  add_decoder(store, "dec", cfg, {"src"}, rng);
  Tensor mem_seq = random_tensor({4, 8}, rng);
  Tensor mem_mask = pad_mask({1, 1, 0, 1}, 3);
  Tensor y = random_tensor({3, 8}, rng);
  auto run = [&](const Tensor& m) {
    std::vector<Memory> mems{{"src", m, mem_mask}};
    return decode(store, "dec", cfg, y, mems, causal_mask(3), Forward{});
  };
  Tensor base = run(mem_seq);
  Tensor m2 = mem_seq.detached();
  for (int j = 0; j < 8; ++j) m2.mutable_data()[2 * 8 + j] = -40.0 + j;
  CHECK(bitwise_equal(run(m2), base));
}

TEST_CASE("the decoder skips empty memories but needs at least one") {
  ParamStore store;
  Rng rng(39);
  StackConfig cfg{1, 8, 2, 16};
  add_decoder(store, "dec", cfg, {"a", "b"}, rng);
  Tensor y = random_tensor({3, 8}, rng);
  Tensor mem_seq = random_tensor({4, 8}, rng);

  std::vector<Memory> with_empty{{"a", Tensor(Shape{0, 8}), Tensor(Shape{0})},
                                 {"b", mem_seq, Tensor(Shape{0})}};
  Tensor skipped = decode(store, "dec", cfg, y, with_empty, causal_mask(3), Forward{});
  CHECK(skipped.shape() == Shape{3, 8});

  std::vector<Memory> all_empty{{"a", Tensor(Shape{0, 8}), Tensor(Shape{0})},
                                {"b", Tensor(Shape{0, 8}), Tensor(Shape{0})}};
  CHECK_THROWS_WITH_AS((void)decode(store, "dec", cfg, y, all_empty, causal_mask(3), Forward{}),
                       doctest::Contains("memory"), ContractError);

  std::vector<Memory> narrow_mem{{"a", Tensor(Shape{2, 4}), Tensor(Shape{0})}};
  CHECK_THROWS_AS((void)decode(store, "dec", cfg, y, narrow_mem, causal_mask(3), Forward{}),
                  ConformanceError);
}

TEST_CASE("duplicating a memory row twice leaves attention nearly unchanged") {
  // Attention is a weighted average, so presenting the same row once or
  // twice only reweights identical values.
  ParamStore store;
  Rng rng(40);
  StackConfig cfg{1, 8, 2, 16};
  add_decoder(store, "dec", cfg, {"src"}, rng);
  Tensor y = random_tensor({3, 8}, rng);
  Tensor row = random_tensor({1, 8}, rng);
  Tensor once = gather_rows(row, {0});
  Tensor twice = gather_rows(row, {0, 0});
  auto run = [&](const Tensor& m) {
    std::vector<Memory> mems{{"src", m, Tensor(Shape{0})}};
    return decode(store, "dec", cfg, y, mems, causal_mask(3), Forward{});
  };
  CHECK(testutil::max_abs_diff(run(once), run(twice)) <= 1e-12);
}

TEST_CASE("decoder parameters pass a finite-difference audit") {
  ParamStore store;
  Rng rng(41);
  StackConfig cfg{2, 6, 2, 9};
  add_decoder(store, "dec", cfg, {"src"}, rng);
  jitter_params(store, 411);
  Tensor y = random_tensor({3, 6}, rng);
  Tensor mem_seq = random_tensor({4, 6}, rng);
  auto loss = [&]() {
    std::vector<Memory> mems{{"src", mem_seq, Tensor(Shape{0})}};
    return anchored_loss(decode(store, "dec", cfg, y, mems, causal_mask(3), Forward{}), 412);
  };
  CHECK(grad_check_store(store, loss, 1e-4) < 1e-5);
}

TEST_SUITE_END();
