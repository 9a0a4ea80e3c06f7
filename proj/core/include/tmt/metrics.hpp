#pragma once

#include <string>
#include <vector>

#include "tmt/data.hpp"
#include "tmt/model.hpp"
#include "tmt/vocab.hpp"

namespace tmt {

/// One scored item: a hypothesis against one or more references, as plain
/// token strings with sentence markers already stripped.
struct EvalItem {
  std::vector<std::string> hyp;
  std::vector<std::vector<std::string>> refs;
};
using EvalCorpus = std::vector<EvalItem>;

/// Corpus-level BLEU-4: modified n-gram precision for n = 1..4 with
/// per-reference clipping, geometric mean, and the closest-reference-length
/// brevity penalty (ties prefer the shorter reference). Zero overlap at
/// any order gives 0; there is no smoothing.
double bleu4(const EvalCorpus& corpus);

/// Modified n-gram precision of a single hypothesis: each hypothesis n-gram
/// counts at most as often as its maximum count in any one reference.
/// Returns 0 when the hypothesis has no n-grams at all.
double clipped_precision(const std::vector<std::string>& hyp,
                         const std::vector<std::vector<std::string>>& refs, int n);

/// Mean over items of the best LCS F-measure (beta = 1.2) across
/// references. Empty hypotheses score 0.
double rouge_l(const EvalCorpus& corpus);

/// CIDEr-D: TF-IDF n-gram vectors for n = 1..4 (document frequency over
/// each item's reference set), clipped cosine per n with a Gaussian length
/// penalty (sigma = 6), averaged over n and references, scaled by 10.
double cider(const EvalCorpus& corpus);

/// One generated answer tied back to its dialog turn.
struct HypLine {
  std::string dialog_id;
  int turn_index = 0;
  std::string text;
};

/// Hypothesis file: one per line, "<dialog_id>:<turn>\t<text>".
void save_hypotheses(const std::string& path, const std::vector<HypLine>& lines);
std::vector<HypLine> load_hypotheses(const std::string& path);

/// Pairs each hypothesis with its example's references; `max_refs` 1 uses
/// only the dialog answer, larger values add the extra reference answers.
EvalCorpus corpus_from_hypotheses(const std::vector<HypLine>& hyps,
                                  const std::vector<TokenizedExample>& examples,
                                  const Vocabulary& vocab, int max_refs);

struct MetricReport {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double perplexity = 0.0;
  int items = 0;
  int refs = 1;
  std::string decode = "greedy";
  int beam_width = 1;

  /// Aligned text table with the generation settings appended.
  std::string table() const;
  /// Line-oriented structured form, one record per line.
  std::string records() const;
};

/// Generates an answer for every example, scores all metrics against the
/// reference answers, and pools perplexity over the same examples.
MetricReport evaluate_run(const MtnModel& model, const std::vector<TokenizedExample>& examples,
                          FeatureLoader* features, const Vocabulary& vocab, DecodeMode mode,
                          int beam_width, int max_len, int max_refs, int batch_size,
                          std::vector<HypLine>* hyps_out = nullptr);

}  // namespace tmt
