#include "tmt/train.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "tmt/error.hpp"
#include "tmt/tnsr.hpp"

namespace tmt {

namespace {
using json = nlohmann::ordered_json;
}

double noam_lr(long step, int d_model, int warmup) {
  if (step < 1) throw ContractError(msg("schedule step must be at least 1, got ", step));
  if (warmup < 1) throw ContractError(msg("warmup must be at least 1, got ", warmup));
  if (d_model < 1) throw ConfigError(msg("d_model must be positive, got ", d_model));
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!params.has(name)) throw ConformanceError(msg("gradient for unknown parameter ", name));
    (void)g;
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (const auto& name : params.names()) {
    Tensor& p = params.raw(name);
    Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    if (m.shape() != p.shape() || v.shape() != p.shape())
      throw ConformanceError(msg("optimizer state shape mismatch for ", name));
    const double* g = nullptr;
    if (auto it = grads.find(name); it != grads.end()) {
      if (it->second.shape() != p.shape())
        throw ConformanceError(msg("gradient shape mismatch for ", name, ": ",
                                   shape_str(it->second.shape()), " vs ",
                                   shape_str(p.shape())));
      g = it->second.data().data();
    }
    double* mp = m.mutable_data().data();
    double* vp = v.mutable_data().data();
    double* pp = p.mutable_data().data();
    const int64_t n = p.size();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = g ? g[i] : 0.0;
      mp[i] = cfg.beta1 * mp[i] + (1.0 - cfg.beta1) * gi;
      vp[i] = cfg.beta2 * vp[i] + (1.0 - cfg.beta2) * gi * gi;
      pp[i] -= lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + cfg.eps);
    }
  }
}

std::map<std::string, Tensor> collect_grads(const ParamStore& params, const GradStore& grads) {
  std::map<std::string, Tensor> out;
  for (const auto& name : params.names()) {
    int node = params.cached_node(name);
    if (node < 0) continue;
    out.emplace(name, grads.at_node(node));
  }
  return out;
}

double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip norm must be positive");
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    (void)name;
    for (double x : g.data()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
      (void)name;
      for (double& x : g.mutable_data()) x *= scale;
    }
  }
  return norm;
}

namespace {

/// 10% decay applied k times in decimal arithmetic: the value's shortest
/// decimal mantissa times 9^k with the exponent shifted, rounded back to
/// double once. Keeps published traces like 0.3 -> 0.27 -> 0.243 exact.
double decay_decimal(double x, int k) {
  if (k <= 0 || x == 0.0 || !std::isfinite(x)) return x;
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  std::string s(buf, res.ptr);
  bool neg = !s.empty() && s[0] == '-';
  if (neg) s.erase(0, 1);
  std::string mant = s;
  long expo = 0;
  if (auto ep = s.find_first_of("eE"); ep != std::string::npos) {
    mant = s.substr(0, ep);
    expo = std::stol(s.substr(ep + 1));
  }
  if (auto dp = mant.find('.'); dp != std::string::npos) {
    expo -= static_cast<long>(mant.size() - dp - 1);
    mant.erase(dp, 1);
  }
  unsigned __int128 m = 0;
  for (char c : mant) m = m * 10 + static_cast<unsigned>(c - '0');
  constexpr unsigned __int128 kMaxU128 = ~static_cast<unsigned __int128>(0);
  for (int i = 0; i < k; ++i) {
    if (m > kMaxU128 / 9) return x * std::pow(0.9, k);  // decayed below any pinned trace
    m *= 9;
  }
  expo -= k;
  std::string digits;
  while (m > 0) {
    digits.push_back(static_cast<char>('0' + static_cast<int>(m % 10)));
    m /= 10;
  }
  std::reverse(digits.begin(), digits.end());
  std::string rebuilt = (neg ? "-" : "") + digits + "e" + std::to_string(expo);
  double out = 0.0;
  std::from_chars(rebuilt.data(), rebuilt.data() + rebuilt.size(), out);
  return out;
}

std::string format_grid_value(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::pair<double, double> weight_decay_schedule(double alpha0, double beta0, int epoch) {
  if (epoch < 0) throw ContractError(msg("epoch must be nonnegative, got ", epoch));
  const int k = epoch / 10;
  return {decay_decimal(alpha0, k), decay_decimal(beta0, k)};
}

void RunRecord::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError(msg("cannot write run record: ", path));
  json head;
  head["record"] = "run";
  head["seed"] = seed;
  head["config"] = config_text;
  out << head.dump() << "\n";
  for (const auto& e : epochs) {
    json j;
    j["record"] = "epoch";
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["l_ans"] = e.l_ans;
    j["l_c"] = e.l_c;
    j["l_s"] = e.l_s;
    j["dev_loss"] = e.dev_loss;
    j["dev_ppl"] = e.dev_ppl;
    j["lr"] = e.lr;
    j["alpha"] = e.alpha;
    j["beta"] = e.beta;
    out << j.dump() << "\n";
  }
  if (best_epoch >= 0) {
    json b;
    b["record"] = "best";
    b["epoch"] = best_epoch;
    b["dev_ppl"] = best_dev_ppl;
    b["checkpoint"] = checkpoint;
    out << b.dump() << "\n";
  }
}

RunRecord RunRecord::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(msg("cannot open run record: ", path));
  RunRecord rec;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(msg("run record line ", lineno, ": ", e.what()));
    }
    const std::string kind = j.value("record", "");
    if (kind == "run") {
      rec.seed = j.at("seed").get<uint64_t>();
      rec.config_text = j.at("config").get<std::string>();
    } else if (kind == "epoch") {
      EpochStats e;
      e.epoch = j.at("epoch").get<int>();
      e.train_loss = j.at("train_loss").get<double>();
      e.l_ans = j.at("l_ans").get<double>();
      e.l_c = j.at("l_c").get<double>();
      e.l_s = j.at("l_s").get<double>();
      e.dev_loss = j.at("dev_loss").get<double>();
      e.dev_ppl = j.at("dev_ppl").get<double>();
      e.lr = j.at("lr").get<double>();
      e.alpha = j.at("alpha").get<double>();
      e.beta = j.at("beta").get<double>();
      rec.epochs.push_back(e);
    } else if (kind == "best") {
      rec.best_epoch = j.at("epoch").get<int>();
      rec.best_dev_ppl = j.at("dev_ppl").get<double>();
      rec.checkpoint = j.value("checkpoint", "");
    } else {
      throw FormatError(msg("run record line ", lineno, ": unknown record kind '", kind, "'"));
    }
  }
  return rec;
}

DevEval dev_eval(const MtnModel& model, const std::vector<TokenizedExample>& examples,
                 FeatureLoader* features, int batch_size) {
  if (examples.empty()) throw ContractError("evaluation set is empty");
  double nll = 0.0;
  int64_t tokens = 0;
  const Forward fw{};  // evaluation regime: no dropout
  for (const auto& batch : batch_and_pad(examples, batch_size)) {
    BatchLoss bl = model.forward_batch(batch, features, fw);
    nll += bl.nll_sum;
    tokens += bl.tokens;
  }
  DevEval de;
  de.loss = nll / static_cast<double>(tokens);
  de.ppl = std::exp(de.loss);
  return de;
}

double perplexity_eval(const MtnModel& model, const std::vector<TokenizedExample>& examples,
                       FeatureLoader* features, int batch_size) {
  return dev_eval(model, examples, features, batch_size).ppl;
}

RunRecord train_model(MtnModel& model, const RunConfig& cfg,
                      const std::vector<TokenizedExample>& train_examples,
                      const std::vector<TokenizedExample>& dev_examples,
                      FeatureLoader* train_features, FeatureLoader* dev_features,
                      const std::string& checkpoint_path) {
  cfg.validate();
  RunRecord rec;
  rec.seed = cfg.seed;
  rec.config_text = cfg.to_text();
  if (cfg.epochs == 0) return rec;
  if (train_examples.empty()) throw ContractError("training set is empty");

  const double base_alpha = model.config().alpha;
  const double base_beta = model.config().beta;
  AdamState adam;
  Rng drop_rng(derive_seed(cfg.seed, "dropout"));
  // Dev evaluation runs on a float32-rounded snapshot so that the saved
  // checkpoint reproduces the recorded dev loss bit-exactly after reload.
  MtnModel snapshot(model.config(), cfg.seed);
  const int d_model = model.config().d;
  long step = 0;

  for (int e = 0; e < cfg.epochs; ++e) {
    double eff_alpha = base_alpha, eff_beta = base_beta;
    if (cfg.decay_weights) {
      std::tie(eff_alpha, eff_beta) = weight_decay_schedule(base_alpha, base_beta, e);
      model.set_loss_weights(eff_alpha, eff_beta);
    }

    std::vector<TokenizedExample> order(train_examples);
    Rng shuffle_rng(derive_seed(cfg.seed, msg("epoch", e)));
    shuffle_rng.shuffle(order);
    auto batches = batch_and_pad(order, cfg.batch);

    double sum_loss = 0.0, sum_ans = 0.0, sum_c = 0.0, sum_s = 0.0;
    int n_c = 0, n_s = 0;
    double last_lr = 0.0;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      Tape tape;
      BatchLoss bl =
          model.forward_batch(batches[bi], train_features, Forward{true, cfg.keep_prob, &drop_rng});
      const double loss_value = bl.total.item();
      if (!std::isfinite(loss_value))
        throw NumericError(msg("non-finite loss at epoch ", e, ", batch ", bi, " (first dialog ",
                               batches[bi].dialog_ids.front(), ")"));
      GradStore gs = tape.backward(bl.total);
      auto grads = collect_grads(model.params(), gs);
      clip_gradients(grads, cfg.clip);
      ++step;
      last_lr = noam_lr(step, d_model, cfg.warmup) * cfg.lr_factor;
      adam_step(model.params(), grads, adam, last_lr);

      sum_loss += loss_value;
      sum_ans += bl.l_ans;
      if (bl.l_c_count > 0) {
        sum_c += bl.l_c;
        ++n_c;
      }
      if (bl.l_s_count > 0) {
        sum_s += bl.l_s;
        ++n_s;
      }
    }

    for (const auto& name : model.params().names())
      snapshot.params().raw(name) = quantize_f32(model.params().raw(name));
    DevEval de = dev_eval(snapshot, dev_examples, dev_features, cfg.batch);

    EpochStats st;
    st.epoch = e;
    st.train_loss = sum_loss / static_cast<double>(batches.size());
    st.l_ans = sum_ans / static_cast<double>(batches.size());
    st.l_c = n_c > 0 ? sum_c / n_c : 0.0;
    st.l_s = n_s > 0 ? sum_s / n_s : 0.0;
    st.dev_loss = de.loss;
    st.dev_ppl = de.ppl;
    st.lr = last_lr;
    st.alpha = eff_alpha;
    st.beta = eff_beta;
    rec.epochs.push_back(st);

    if (rec.best_epoch < 0 || de.ppl < rec.best_dev_ppl) {
      rec.best_epoch = e;
      rec.best_dev_ppl = de.ppl;
      if (!checkpoint_path.empty()) {
        checkpoint_save(checkpoint_path, snapshot.params());
        rec.checkpoint = checkpoint_path;
      }
    }
  }

  if (cfg.decay_weights) model.set_loss_weights(base_alpha, base_beta);
  return rec;
}

GridResult grid_search(const RunConfig& base, std::vector<double> alpha_grid,
                       std::vector<double> beta_grid, int vocab, int d_feat_video,
                       int d_feat_audio, const std::vector<TokenizedExample>& train_examples,
                       const std::vector<TokenizedExample>& dev_examples,
                       const DatasetManifest* train_features, const DatasetManifest* dev_features,
                       int jobs) {
  if (alpha_grid.empty() || beta_grid.empty()) throw ContractError("grid must be nonempty");
  for (double a : alpha_grid)
    if (a < 0.0) throw ConfigError("alpha grid values must be nonnegative");
  for (double b : beta_grid)
    if (b < 0.0) throw ConfigError("beta grid values must be nonnegative");
  auto canon = [](std::vector<double>& g) {
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
  };
  canon(alpha_grid);
  canon(beta_grid);

  struct Task {
    double alpha, beta;
    uint64_t seed;
  };
  std::vector<Task> tasks;
  for (double a : alpha_grid)
    for (double b : beta_grid)
      tasks.push_back({a, b,
                       derive_seed(base.seed, msg("grid:", format_grid_value(a), ":",
                                                  format_grid_value(b)))});

  std::vector<RunRecord> records(tasks.size());
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&]() {
    for (size_t i; (i = next.fetch_add(1)) < tasks.size();) {
      try {
        RunConfig pc = base;
        pc.alpha = tasks[i].alpha;
        pc.beta = tasks[i].beta;
        pc.seed = tasks[i].seed;
        MtnModel point_model(pc.model_config(vocab, d_feat_video, d_feat_audio), pc.seed);
        std::optional<FeatureLoader> tl, dl;
        FeatureLoader* tlp = nullptr;
        FeatureLoader* dlp = nullptr;
        if (train_features != nullptr) {
          tl.emplace(*train_features);
          tlp = &*tl;
        }
        if (dev_features != nullptr) {
          dl.emplace(*dev_features);
          dlp = &*dl;
        }
        records[i] = train_model(point_model, pc, train_examples, dev_examples, tlp, dlp, "");
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  GridResult out;
  size_t best = 0;
  auto ppl_of = [&](size_t i) {
    return records[i].best_epoch < 0 ? std::numeric_limits<double>::infinity()
                                     : records[i].best_dev_ppl;
  };
  for (size_t i = 0; i < tasks.size(); ++i) {
    GridPoint p;
    p.alpha = tasks[i].alpha;
    p.beta = tasks[i].beta;
    p.seed = tasks[i].seed;
    p.best_dev_ppl = records[i].best_dev_ppl;
    p.best_epoch = records[i].best_epoch;
    out.points.push_back(p);
    if (ppl_of(i) < ppl_of(best)) best = i;  // ties keep the earlier point:
  }                                          // grids are sorted, so smaller alpha then beta
  out.best_alpha = tasks[best].alpha;
  out.best_beta = tasks[best].beta;
  out.best_record = std::move(records[best]);
  return out;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd ms;
  ms.n = static_cast<int>(values.size());
  if (ms.n == 0) return ms;
  double sum = 0.0;
  for (double v : values) sum += v;
  ms.mean = sum / ms.n;
  if (ms.n < 2) return ms;
  double sq = 0.0;
  for (double v : values) sq += (v - ms.mean) * (v - ms.mean);
  ms.stddev = std::sqrt(sq / (ms.n - 1));
  return ms;
}

}  // namespace tmt
