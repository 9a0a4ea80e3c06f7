#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tmt/config.hpp"
#include "tmt/data.hpp"
#include "tmt/model.hpp"

namespace tmt {

/// Inverse-sqrt warmup schedule: d^(-1/2) * min(step^(-1/2), step * warmup^(-3/2)).
/// Steps are 1-based; step 0 is a caller bug.
double noam_lr(long step, int d_model, int warmup);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// Per-parameter moment accumulators plus the shared step counter.
struct AdamState {
  std::map<std::string, Tensor> m, v;
  long t = 0;
};

/// One bias-corrected Adam update, in place. Parameters absent from
/// `grads` are treated as zero-gradient.
void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr, const AdamConfig& cfg = {});

/// Copies leaf gradients out of a backward pass, keyed by parameter name.
/// Parameters that never touched the tape are omitted.
std::map<std::string, Tensor> collect_grads(const ParamStore& params, const GradStore& grads);

/// Scales all gradients in place so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm);

/// Multiplies both weights by 0.9 at epochs 10, 20, 30, ... The decay is
/// decimal arithmetic: starting from the value's shortest decimal form,
/// so e.g. 0.3 traces exactly 0.3, 0.27, 0.243.
std::pair<double, double> weight_decay_schedule(double alpha0, double beta0, int epoch);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;  // mean of batch losses
  double l_ans = 0.0, l_c = 0.0, l_s = 0.0;
  double dev_loss = 0.0;  // mean answer-token nll
  double dev_ppl = 0.0;
  double lr = 0.0;  // last step of the epoch
  double alpha = 0.0, beta = 0.0;  // effective weights this epoch
};

struct RunRecord {
  uint64_t seed = 0;
  std::string config_text;
  std::vector<EpochStats> epochs;
  int best_epoch = -1;  // -1 until a dev evaluation happened
  double best_dev_ppl = 0.0;
  std::string checkpoint;  // best-epoch checkpoint path, may be empty

  void save(const std::string& path) const;
  static RunRecord load(const std::string& path);
};

struct DevEval {
  double loss = 0.0;  // mean answer-token nll
  double ppl = 1.0;
};

/// Pooled answer-branch evaluation with dropout off: exp of total nll over
/// total answer tokens. Translator losses do not participate.
DevEval dev_eval(const MtnModel& model, const std::vector<TokenizedExample>& examples,
                 FeatureLoader* features, int batch_size);
double perplexity_eval(const MtnModel& model, const std::vector<TokenizedExample>& examples,
                       FeatureLoader* features, int batch_size);

/// Full training loop: seeded shuffle, batching, backward, clipped Adam
/// with the warmup schedule, per-epoch dev evaluation on a float32-rounded
/// parameter snapshot, and best-perplexity checkpointing (when
/// `checkpoint_path` is nonempty). Deterministic given cfg.seed.
RunRecord train_model(MtnModel& model, const RunConfig& cfg,
                      const std::vector<TokenizedExample>& train_examples,
                      const std::vector<TokenizedExample>& dev_examples,
                      FeatureLoader* train_features, FeatureLoader* dev_features,
                      const std::string& checkpoint_path);

struct GridPoint {
  double alpha = 0.0, beta = 0.0;
  uint64_t seed = 0;
  double best_dev_ppl = 0.0;
  int best_epoch = -1;
};

struct GridResult {
  std::vector<GridPoint> points;  // sorted by (alpha, beta)
  double best_alpha = 0.0, best_beta = 0.0;
  RunRecord best_record;
};

/// One full training run per (alpha, beta) grid point, each with a seed
/// derived from the point's value, optionally fanned out over `jobs`
/// threads. Lowest best-dev perplexity wins; ties prefer smaller alpha,
/// then smaller beta. Result is invariant to grid enumeration order.
GridResult grid_search(const RunConfig& base, std::vector<double> alpha_grid,
                       std::vector<double> beta_grid, int vocab, int d_feat_video,
                       int d_feat_audio, const std::vector<TokenizedExample>& train_examples,
                       const std::vector<TokenizedExample>& dev_examples,
                       const DatasetManifest* train_features, const DatasetManifest* dev_features,
                       int jobs);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 when n < 2
  int n = 0;
};

MeanStd mean_std(const std::vector<double>& values);

}  // namespace tmt
