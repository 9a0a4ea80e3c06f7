#include "tmt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tmt/error.hpp"
#include "tmt/train.hpp"

namespace tmt {

namespace {

using json = nlohmann::ordered_json;

void validate_corpus(const EvalCorpus& corpus, const char* op) {
  if (corpus.empty()) throw ContractError(msg(op, ": empty evaluation corpus"));
  for (size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].refs.empty())
      throw ContractError(msg(op, ": item ", i, " has no references"));
}

/// n-gram multiset as joined keys; tokens never contain the separator.
std::map<std::string, int> ngram_counts(const std::vector<std::string>& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += tokens[i + j];
    }
    ++counts[key];
  }
  return counts;
}

/// Accumulates the clipped match and total n-gram counts of one hypothesis.
void clipped_counts(const std::vector<std::string>& hyp,
                    const std::vector<std::vector<std::string>>& refs, int n, double* matched,
                    double* total) {
  auto hyp_counts = ngram_counts(hyp, n);
  if (hyp_counts.empty()) return;
  std::map<std::string, int> clip;
  for (const auto& ref : refs)
    for (const auto& [g, c] : ngram_counts(ref, n)) {
      auto& slot = clip[g];
      slot = std::max(slot, c);
    }
  for (const auto& [g, c] : hyp_counts) {
    *total += c;
    auto it = clip.find(g);
    if (it != clip.end()) *matched += std::min(c, it->second);
  }
}

int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const size_t n = a.size(), m = b.size();
  if (n == 0 || m == 0) return 0;
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace

double bleu4(const EvalCorpus& corpus) {
  validate_corpus(corpus, "bleu4");
  constexpr int kMaxN = 4;
  double matched[kMaxN] = {0, 0, 0, 0};
  double total[kMaxN] = {0, 0, 0, 0};
  long hyp_len = 0, ref_len = 0;

  for (const auto& item : corpus) {
    const long h = static_cast<long>(item.hyp.size());
    hyp_len += h;
    long best_ref = static_cast<long>(item.refs[0].size());
    for (const auto& ref : item.refs) {
      const long r = static_cast<long>(ref.size());
      const long d_new = std::labs(r - h), d_old = std::labs(best_ref - h);
      if (d_new < d_old || (d_new == d_old && r < best_ref)) best_ref = r;
    }
    ref_len += best_ref;

    for (int n = 1; n <= kMaxN; ++n)
      clipped_counts(item.hyp, item.refs, n, &matched[n - 1], &total[n - 1]);
  }

  double log_precision = 0.0;
  for (int n = 0; n < kMaxN; ++n) {
    if (matched[n] == 0.0) return 0.0;
    log_precision += 0.25 * std::log(matched[n] / total[n]);
  }
  double bp = 1.0;
  if (hyp_len <= ref_len)
    bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return bp * std::exp(log_precision);
}

double clipped_precision(const std::vector<std::string>& hyp,
                         const std::vector<std::vector<std::string>>& refs, int n) {
  if (n < 1) throw ContractError(msg("clipped_precision: order must be positive, got ", n));
  double matched = 0.0, total = 0.0;
  clipped_counts(hyp, refs, n, &matched, &total);
  return total == 0.0 ? 0.0 : matched / total;
}

double rouge_l(const EvalCorpus& corpus) {
  validate_corpus(corpus, "rouge_l");
  constexpr double kBeta = 1.2;
  double sum = 0.0;
  for (const auto& item : corpus) {
    double best = 0.0;
    if (!item.hyp.empty()) {
      for (const auto& ref : item.refs) {
        if (ref.empty()) continue;
        const int lcs = lcs_length(item.hyp, ref);
        if (lcs == 0) continue;
        const double p = static_cast<double>(lcs) / static_cast<double>(item.hyp.size());
        const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
        const double f = (1.0 + kBeta * kBeta) * p * r / (r + kBeta * kBeta * p);
        best = std::max(best, f);
      }
    }
    sum += best;
  }
  return sum / static_cast<double>(corpus.size());
}

double cider(const EvalCorpus& corpus) {
  validate_corpus(corpus, "cider");
  if (corpus.size() < 2)
    throw ContractError(msg("cider: corpus of ", corpus.size(),
                            " item(s) makes idf degenerate; need at least 2"));
  constexpr int kMaxN = 4;
  constexpr double kSigma = 6.0;
  const double log_n = std::log(static_cast<double>(corpus.size()));

  // Document frequency: in how many items an n-gram appears in any reference.
  std::map<std::string, int> df[kMaxN];
  for (const auto& item : corpus) {
    std::set<std::string> seen[kMaxN];
    for (const auto& ref : item.refs)
      for (int n = 1; n <= kMaxN; ++n)
        for (const auto& [g, c] : ngram_counts(ref, n)) {
          (void)c;
          seen[n - 1].insert(g);
        }
    for (int n = 0; n < kMaxN; ++n)
      for (const auto& g : seen[n]) ++df[n][g];
  }

  struct TfIdf {
    std::map<std::string, double> vec[kMaxN];
    double norm[kMaxN] = {0, 0, 0, 0};
    long length = 0;
  };
  auto vectorize = [&](const std::vector<std::string>& tokens) {
    TfIdf out;
    out.length = static_cast<long>(tokens.size());
    for (int n = 1; n <= kMaxN; ++n) {
      for (const auto& [g, c] : ngram_counts(tokens, n)) {
        auto it = df[n - 1].find(g);
        const double d = it == df[n - 1].end() ? 0.0 : static_cast<double>(it->second);
        const double idf = log_n - std::log(std::max(1.0, d));
        const double v = static_cast<double>(c) * idf;
        out.vec[n - 1][g] = v;
        out.norm[n - 1] += v * v;
      }
      out.norm[n - 1] = std::sqrt(out.norm[n - 1]);
    }
    return out;
  };

  double corpus_sum = 0.0;
  for (const auto& item : corpus) {
    TfIdf hyp = vectorize(item.hyp);
    double ref_sum = 0.0;
    for (const auto& ref : item.refs) {
      TfIdf rv = vectorize(ref);
      const double delta = static_cast<double>(hyp.length - rv.length);
      const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
      double val = 0.0;
      for (int n = 0; n < kMaxN; ++n) {
        double dot = 0.0;
        for (const auto& [g, hv] : hyp.vec[n]) {
          auto it = rv.vec[n].find(g);
          if (it != rv.vec[n].end()) dot += std::min(hv, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && rv.norm[n] != 0.0) dot /= hyp.norm[n] * rv.norm[n];
        val += dot * penalty;
      }
      ref_sum += val / kMaxN;
    }
    corpus_sum += 10.0 * ref_sum / static_cast<double>(item.refs.size());
  }
  return corpus_sum / static_cast<double>(corpus.size());
}

void save_hypotheses(const std::string& path, const std::vector<HypLine>& lines) {
  std::ofstream out(path);
  if (!out) throw FormatError(msg("cannot write hypothesis file: ", path));
  for (const auto& h : lines) out << h.dialog_id << ":" << h.turn_index << "\t" << h.text << "\n";
}

std::vector<HypLine> load_hypotheses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(msg("cannot open hypothesis file: ", path));
  std::vector<HypLine> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError(msg("hypothesis line ", lineno, ": missing tab separator"));
    const std::string id = line.substr(0, tab);
    const size_t colon = id.rfind(':');
    if (colon == std::string::npos)
      throw FormatError(msg("hypothesis line ", lineno, ": id lacks ':<turn>' suffix"));
    HypLine h;
    h.dialog_id = id.substr(0, colon);
    try {
      h.turn_index = std::stoi(id.substr(colon + 1));
    } catch (const std::exception&) {
      throw FormatError(msg("hypothesis line ", lineno, ": bad turn index"));
    }
    h.text = line.substr(tab + 1);
    out.push_back(h);
  }
  return out;
}

EvalCorpus corpus_from_hypotheses(const std::vector<HypLine>& hyps,
                                  const std::vector<TokenizedExample>& examples,
                                  const Vocabulary& vocab, int max_refs) {
  if (max_refs < 1) throw ContractError("max_refs must be at least 1");
  std::map<std::pair<std::string, int>, const TokenizedExample*> index;
  for (const auto& ex : examples) index[{ex.dialog_id, ex.turn_index}] = &ex;
  EvalCorpus corpus;
  for (const auto& h : hyps) {
    auto it = index.find({h.dialog_id, h.turn_index});
    if (it == index.end())
      throw FormatError(msg("hypothesis for unknown example ", h.dialog_id, ":", h.turn_index));
    const TokenizedExample& ex = *it->second;
    EvalItem item;
    item.hyp = tokenize(h.text);
    item.refs.push_back(vocab.decode_tokens(ex.answer));
    for (const auto& r : ex.answer_refs) {
      if (static_cast<int>(item.refs.size()) >= max_refs) break;
      item.refs.push_back(vocab.decode_tokens(r));
    }
    corpus.push_back(std::move(item));
  }
  return corpus;
}

std::string MetricReport::table() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6);
  out << std::left << std::setw(12) << "metric" << "value\n";
  out << std::left << std::setw(12) << "BLEU-4" << bleu4 << "\n";
  out << std::left << std::setw(12) << "ROUGE-L" << rouge_l << "\n";
  out << std::left << std::setw(12) << "CIDEr" << cider << "\n";
  out << std::left << std::setw(12) << "perplexity" << perplexity << "\n";
  out << std::left << std::setw(12) << "settings"
      << "decode=" << decode << " beam=" << beam_width << " refs=" << refs
      << " items=" << items << "\n";
  return out.str();
}

std::string MetricReport::records() const {
  std::ostringstream out;
  auto metric = [&](const char* name, double value) {
    json j;
    j["record"] = "metric";
    j["name"] = name;
    j["value"] = value;
    out << j.dump() << "\n";
  };
  metric("BLEU-4", bleu4);
  metric("ROUGE-L", rouge_l);
  metric("CIDEr", cider);
  metric("perplexity", perplexity);
  json s;
  s["record"] = "settings";
  s["decode"] = decode;
  s["beam_width"] = beam_width;
  s["refs"] = refs;
  s["items"] = items;
  out << s.dump() << "\n";
  return out.str();
}

MetricReport evaluate_run(const MtnModel& model, const std::vector<TokenizedExample>& examples,
                          FeatureLoader* features, const Vocabulary& vocab, DecodeMode mode,
                          int beam_width, int max_len, int max_refs, int batch_size,
                          std::vector<HypLine>* hyps_out) {
  if (examples.empty()) throw ContractError("evaluation set is empty");
  std::vector<HypLine> hyps;
  for (const auto& ex : examples) {
    ExampleView view = model.view(ex, features);
    GenResult gen = model.generate(view, mode, beam_width, max_len);
    hyps.push_back({ex.dialog_id, ex.turn_index, vocab.decode(gen.tokens)});
  }
  EvalCorpus corpus = corpus_from_hypotheses(hyps, examples, vocab, max_refs);

  MetricReport rep;
  rep.bleu4 = tmt::bleu4(corpus);
  rep.rouge_l = tmt::rouge_l(corpus);
  rep.cider = tmt::cider(corpus);
  rep.perplexity = dev_eval(model, examples, features, batch_size).ppl;
  rep.items = static_cast<int>(corpus.size());
  int refs = std::numeric_limits<int>::max();
  for (const auto& item : corpus) refs = std::min(refs, static_cast<int>(item.refs.size()));
  rep.refs = refs;
  rep.decode = mode == DecodeMode::beam ? "beam" : "greedy";
  rep.beam_width = mode == DecodeMode::beam ? beam_width : 1;
  if (hyps_out != nullptr) *hyps_out = std::move(hyps);
  return rep;
}

}  // namespace tmt
