#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <random>
#include <set>

namespace oracle {

namespace {

// n-gram multiset keyed by the token vector itself.
std::map<Sentence, int> grams(const Sentence& s, int n) {
  std::map<Sentence, int> out;
  const int len = static_cast<int>(s.size());
  for (int i = 0; i + n <= len; ++i) {
    Sentence g(s.begin() + i, s.begin() + i + n);
    ++out[g];
  }
  return out;
}

}  // namespace

double bleu4(const Corpus& corpus) {
  long long match[4] = {0, 0, 0, 0};
  long long total[4] = {0, 0, 0, 0};
  long long c_len = 0;
  long long r_len = 0;

  for (const Item& item : corpus) {
    c_len += static_cast<long long>(item.hyp.size());

    // Closest reference length; on a tie the shorter reference wins.
    long long best = -1;
    for (const Sentence& ref : item.refs) {
      const long long r = static_cast<long long>(ref.size());
      if (best < 0) {
        best = r;
        continue;
      }
      const long long da = std::llabs(r - static_cast<long long>(item.hyp.size()));
      const long long db = std::llabs(best - static_cast<long long>(item.hyp.size()));
      if (da < db || (da == db && r < best)) best = r;
    }
    r_len += best;

    for (int n = 1; n <= 4; ++n) {
      const auto hyp_grams = grams(item.hyp, n);
      for (const auto& [g, c] : hyp_grams) {
        int allowed = 0;
        for (const Sentence& ref : item.refs) {
          const auto ref_grams = grams(ref, n);
          const auto it = ref_grams.find(g);
          if (it != ref_grams.end()) allowed = std::max(allowed, it->second);
        }
        match[n - 1] += std::min(c, allowed);
        total[n - 1] += c;
      }
    }
  }

  double geo = 1.0;
  for (int n = 0; n < 4; ++n) {
    if (match[n] == 0) return 0.0;
    geo *= std::pow(static_cast<double>(match[n]) / static_cast<double>(total[n]), 0.25);
  }
  const double bp =
      c_len > r_len ? 1.0
                    : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  return bp * geo;
}

double rouge_l(const Corpus& corpus) {
  const double b2 = 1.2 * 1.2;
  double acc = 0.0;
  for (const Item& item : corpus) {
    double best = 0.0;
    for (const Sentence& ref : item.refs) {
      const int n = static_cast<int>(item.hyp.size());
      const int m = static_cast<int>(ref.size());
      if (n == 0 || m == 0) continue;
      // Full 2-D dynamic-programming table for the LCS length.
      std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
      for (int i = 1; i <= n; ++i)
        for (int j = 1; j <= m; ++j)
          dp[i][j] = item.hyp[i - 1] == ref[j - 1] ? dp[i - 1][j - 1] + 1
                                                   : std::max(dp[i - 1][j], dp[i][j - 1]);
      const int lcs = dp[n][m];
      if (lcs == 0) continue;
      const double p = static_cast<double>(lcs) / n;
      const double r = static_cast<double>(lcs) / m;
      const double f = (1.0 + b2) * r * p / (r + b2 * p);
      if (f > best) best = f;
    }
    acc += best;
  }
  return acc / static_cast<double>(corpus.size());
}

double cider(const Corpus& corpus) {
  const int total_items = static_cast<int>(corpus.size());

  // Document frequency per order: number of items whose reference set
  // contains the n-gram at least once.
  std::map<Sentence, int> df[4];
  for (const Item& item : corpus) {
    for (int n = 1; n <= 4; ++n) {
      std::set<Sentence> here;
      for (const Sentence& ref : item.refs)
        for (const auto& [g, c] : grams(ref, n)) {
          (void)c;
          here.insert(g);
        }
      for (const Sentence& g : here) ++df[n - 1][g];
    }
  }

  auto tfidf = [&](const Sentence& s, int n) {
    std::map<Sentence, double> v;
    for (const auto& [g, c] : grams(s, n)) {
      const auto it = df[n - 1].find(g);
      const int d = it == df[n - 1].end() ? 0 : it->second;
      v[g] = c * std::log(static_cast<double>(total_items) / std::max(1, d));
    }
    return v;
  };
  auto norm = [](const std::map<Sentence, double>& v) {
    double s = 0.0;
    for (const auto& [g, x] : v) {
      (void)g;
      s += x * x;
    }
    return std::sqrt(s);
  };

  double corpus_score = 0.0;
  for (const Item& item : corpus) {
    double item_score = 0.0;
    for (const Sentence& ref : item.refs) {
      const double dl =
          static_cast<double>(item.hyp.size()) - static_cast<double>(ref.size());
      const double pen = std::exp(-dl * dl / 72.0);
      double over_n = 0.0;
      for (int n = 1; n <= 4; ++n) {
        const auto hv = tfidf(item.hyp, n);
        const auto rv = tfidf(ref, n);
        double dot = 0.0;
        for (const auto& [g, x] : hv) {
          const auto it = rv.find(g);
          if (it != rv.end()) dot += std::min(x, it->second) * it->second;
        }
        const double hn = norm(hv);
        const double rn = norm(rv);
        if (hn > 0.0 && rn > 0.0) over_n += pen * dot / (hn * rn);
      }
      item_score += over_n / 4.0;
    }
    corpus_score += 10.0 * item_score / static_cast<double>(item.refs.size());
  }
  return corpus_score / static_cast<double>(total_items);
}

AdamTrace adam_scalar(double theta0, const std::vector<double>& grads, double lr, double beta1,
                      double beta2, double eps) {
  AdamTrace t;
  t.theta = theta0;
  double b1t = 1.0;
  double b2t = 1.0;
  for (const double g : grads) {
    t.m = beta1 * t.m + (1.0 - beta1) * g;
    t.v = beta2 * t.v + (1.0 - beta2) * g * g;
    b1t *= beta1;
    b2t *= beta2;
    const double mhat = t.m / (1.0 - b1t);
    const double vhat = t.v / (1.0 - b2t);
    t.theta -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  return t;
}

Corpus random_corpus(uint64_t seed, int n_items, int max_len) {
  static const char* kWords[] = {"a",   "b",   "c",    "dog",  "cat",  "runs",
                                 "sat", "the", "blue", "fast", "over", "mat"};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> word(0, 11);
  std::uniform_int_distribution<int> nrefs(1, 3);

  auto sentence = [&](int lo, int hi) {
    std::uniform_int_distribution<int> len(lo, hi);
    Sentence s;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) s.push_back(kWords[word(rng)]);
    return s;
  };

  Corpus corpus;
  for (int i = 0; i < n_items; ++i) {
    Item item;
    // Hypotheses may be empty; references always have at least one token.
    item.hyp = sentence(0, max_len);
    const int r = nrefs(rng);
    for (int j = 0; j < r; ++j) item.refs.push_back(sentence(1, max_len));
    corpus.push_back(std::move(item));
  }
  return corpus;
}

}  // namespace oracle
