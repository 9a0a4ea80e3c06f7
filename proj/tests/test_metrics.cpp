#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "tmt/error.hpp"
#include "tmt/metrics.hpp"

using namespace tmt;
using testutil::TempDir;
using testutil::write_file;

namespace {

std::vector<std::string> words(const std::string& text) { return tokenize(text); }

EvalItem item(const std::string& hyp, std::initializer_list<std::string> refs) {
  EvalItem it;
  it.hyp = words(hyp);
  for (const std::string& r : refs) it.refs.push_back(words(r));
  return it;
}

EvalCorpus to_corpus(const oracle::Corpus& c) {
  EvalCorpus out;
  for (const oracle::Item& it : c) out.push_back({it.hyp, it.refs});
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("verbatim hypotheses score perfectly") {
  EvalCorpus c{item("the cat sat on the mat", {"the cat sat on the mat"}),
               item("a dog runs fast", {"a dog runs fast", "some other text here"})};
  CHECK(bleu4(c) == 1.0);
  CHECK(rouge_l(c) == 1.0);
}

TEST_CASE("clipping caps repeated words at their reference count") {
  const double p = clipped_precision(words("the the the"), {words("the cat")}, 1);
  CHECK(p == 1.0 / 3.0);
  CHECK(clipped_precision(words("the the the"), {words("the the cat")}, 1) == 2.0 / 3.0);
  // The clip is the maximum over references, not their sum.
  CHECK(clipped_precision(words("the the the"), {words("the cat"), words("the dog")}, 1) ==
        1.0 / 3.0);
  CHECK(clipped_precision(words("a b"), {words("a b")}, 3) == 0.0);
  CHECK(clipped_precision({}, {words("a")}, 1) == 0.0);
  CHECK_THROWS_AS((void)clipped_precision(words("a"), {words("a")}, 0), ContractError);
}

TEST_CASE("the overlap F-measure hits its worked value") {
  // Hypothesis "a b c d" against reference "a c d": LCS 3, precision 3/4,
  // recall 1, beta 1.2.
  EvalCorpus c{item("a b c d", {"a c d"})};
  const double x = rouge_l(c);
  CHECK(std::abs(x - 0.87981) < 5e-6);

  const double b2 = 1.2 * 1.2;
  const double want = (1.0 + b2) * 1.0 * 0.75 / (1.0 + b2 * 0.75);
  CHECK(x == want);
}

TEST_CASE("a two-item echo corpus with disjoint vocabularies scores ten") {
  // With hyp == ref everywhere and no shared n-grams across items, every
  // n-gram has document frequency 1, cosines are exactly 1, and the
  // consensus score collapses to its scale factor.
  EvalCorpus c{item("a b c d e", {"a b c d e"}), item("f g h i j", {"f g h i j"})};
  CHECK(std::abs(cider(c) - 10.0) <= 1e-12);
}

TEST_CASE("consensus scoring needs at least two items") {
  EvalCorpus one{item("a b", {"a b"})};
  CHECK_THROWS_AS((void)cider(one), ContractError);
  CHECK_THROWS_AS((void)cider({}), ContractError);
  CHECK_THROWS_AS((void)bleu4({}), ContractError);
  CHECK_THROWS_AS((void)rouge_l({}), ContractError);

  EvalItem no_refs;
  no_refs.hyp = words("a b");
  CHECK_THROWS_AS((void)bleu4({no_refs}), ContractError);
}

TEST_CASE("empty hypotheses are worth zero, not an error") {
  EvalCorpus c{item("", {"the cat"}), item("the cat", {"the cat"})};
  CHECK(bleu4(c) < 1.0);
  CHECK(rouge_l(c) == 0.5);
  const double score = cider(c);
  CHECK(score >= 0.0);
  CHECK(score <= 10.0);
}

TEST_CASE("zero n-gram overlap zeroes the whole geometric mean") {
  EvalCorpus c{item("x y z w", {"a b c d"})};
  CHECK(bleu4(c) == 0.0);
}

TEST_CASE("the brevity penalty punishes short output") {
  EvalCorpus exact{item("a b c d e", {"a b c d e"})};
  EvalCorpus shorter{item("a b c d e", {"a b c d e f"})};
  const double cut = bleu4(shorter);
  CHECK(bleu4(exact) == 1.0);
  CHECK(cut < 1.0);
  // Every n-gram precision is perfect, so all that remains is e^(1-r/c).
  CHECK(std::abs(cut - std::exp(1.0 - 6.0 / 5.0)) <= 1e-12);

  // The closest reference length wins; ties prefer the shorter reference.
  EvalCorpus tie{item("a b c d e", {"a b c d", "a b c d e f"})};
  // c = 5; lengths 4 and 6 tie, so r = 4 < c and there is no penalty.
  CHECK(bleu4(tie) == 1.0);
}

TEST_CASE("scores agree with independent reimplementations on random corpora") {
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    oracle::Corpus oc = oracle::random_corpus(seed, 3 + static_cast<int>(seed % 18), 15);
    EvalCorpus c = to_corpus(oc);
    const double b = bleu4(c);
    const double r = rouge_l(c);
    const double d = cider(c);
    INFO("seed ", seed);
    CHECK(std::abs(b - oracle::bleu4(oc)) <= 1e-12);
    CHECK(std::abs(r - oracle::rouge_l(oc)) <= 1e-12);
    CHECK(std::abs(d - oracle::cider(oc)) <= 1e-9);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    CHECK(d >= 0.0);
    CHECK(d <= 10.0 + 1e-9);
  }
}

TEST_CASE("item order does not change any score") {
  oracle::Corpus oc = oracle::random_corpus(99, 12, 10);
  EvalCorpus c = to_corpus(oc);
  EvalCorpus reversed(c.rbegin(), c.rend());
  CHECK(bleu4(c) == bleu4(reversed));
  CHECK(std::abs(rouge_l(c) - rouge_l(reversed)) <= 1e-12);
  CHECK(std::abs(cider(c) - cider(reversed)) <= 1e-12);
}

TEST_CASE("duplicating the whole corpus leaves overlap precision unchanged") {
  oracle::Corpus oc = oracle::random_corpus(7, 9, 12);
  EvalCorpus c = to_corpus(oc);
  EvalCorpus doubled = c;
  doubled.insert(doubled.end(), c.begin(), c.end());
  // Every count doubles, so every quotient in the score is bit-identical.
  CHECK(bleu4(doubled) == bleu4(c));
}

TEST_CASE("hypothesis files round-trip and validate") {
  TempDir dir;
  const std::string path = dir.file("hyps.tsv");
  std::vector<HypLine> lines{{"d0", 0, "the cat sat"}, {"d0", 1, "on the mat"},
                             {"d1", 0, "a dog"}};
  save_hypotheses(path, lines);
  std::vector<HypLine> back = load_hypotheses(path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].dialog_id == lines[i].dialog_id);
    CHECK(back[i].turn_index == lines[i].turn_index);
    CHECK(back[i].text == lines[i].text);
  }

  write_file(path, "d0:0 no tab here\n");
  CHECK_THROWS_WITH_AS((void)load_hypotheses(path), doctest::Contains("line 1"), FormatError);
  write_file(path, "d0:0\tok\nd1-no-colon\talso ok\n");
  CHECK_THROWS_WITH_AS((void)load_hypotheses(path), doctest::Contains("line 2"), FormatError);
  write_file(path, "d0:x\tbad turn\n");
  CHECK_THROWS_AS((void)load_hypotheses(path), FormatError);
  CHECK_THROWS_AS((void)load_hypotheses(dir.file("absent.tsv")), FormatError);
}

TEST_CASE("hypotheses join their examples' references by dialog and turn") {
  Vocabulary vocab = Vocabulary::build({"the cat sat on the mat a dog runs"}, 1);
  TokenizedExample e0;
  e0.dialog_id = "d0";
  e0.turn_index = 0;
  e0.answer = vocab.encode("the cat sat", true);
  e0.answer_refs = {vocab.encode("a cat sat", true)};
  TokenizedExample e1;
  e1.dialog_id = "d0";
  e1.turn_index = 1;
  e1.answer = vocab.encode("on the mat", true);
  std::vector<TokenizedExample> examples{e0, e1};

  std::vector<HypLine> hyps{{"d0", 0, "the cat sat"}, {"d0", 1, "the mat"}};
  EvalCorpus joined = corpus_from_hypotheses(hyps, examples, vocab, 4);
  REQUIRE(joined.size() == 2);
  CHECK(joined[0].hyp == words("the cat sat"));
  REQUIRE(joined[0].refs.size() == 2);
  CHECK(joined[0].refs[0] == words("the cat sat"));
  CHECK(joined[0].refs[1] == words("a cat sat"));
  REQUIRE(joined[1].refs.size() == 1);
  CHECK(joined[1].refs[0] == words("on the mat"));

  EvalCorpus primary_only = corpus_from_hypotheses(hyps, examples, vocab, 1);
  CHECK(primary_only[0].refs.size() == 1);

  std::vector<HypLine> orphan{{"dX", 0, "the cat"}};
  CHECK_THROWS_AS((void)corpus_from_hypotheses(orphan, examples, vocab, 1), FormatError);
}

TEST_CASE("the report renders every metric in both formats") {
  MetricReport rep;
  rep.bleu4 = 0.25;
  rep.rouge_l = 0.5;
  rep.cider = 2.5;
  rep.perplexity = 12.0;
  rep.items = 7;
  rep.refs = 2;
  rep.decode = "beam";
  rep.beam_width = 5;
  for (const std::string& text : {rep.table(), rep.records()}) {
    for (const char* needle :
         {"BLEU-4", "ROUGE-L", "CIDEr", "perplexity", "beam", "0.25"}) {
      INFO(text);
      CHECK(text.find(needle) != std::string::npos);
    }
  }
}

TEST_SUITE_END();
