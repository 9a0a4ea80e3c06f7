#include "tmt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tmt/nn.hpp"
#include "tmt/rng.hpp"

namespace tmt {

namespace {

/// Central-difference probe of one tensor against its analytic gradient
/// (null means expected-zero), folding results into `rpt`.
void probe_tensor(const std::string& name, Tensor& t, const Tensor* analytic, const LossFn& loss,
                  double step, int max_coords_per_param, uint64_t sample_seed,
                  GradCheckReport& rpt) {
  const int64_t n = t.size();
  std::vector<int64_t> coords;
  if (max_coords_per_param > 0 && n > max_coords_per_param) {
    Rng rng(derive_seed(sample_seed, name));
    std::vector<int64_t> all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    rng.shuffle(all);
    coords.assign(all.begin(), all.begin() + max_coords_per_param);
  } else {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  }

  for (int64_t i : coords) {
    const double saved = t.data()[static_cast<size_t>(i)];
    t.mutable_data()[static_cast<size_t>(i)] = saved + step;
    const double f_plus = loss().item();
    t.mutable_data()[static_cast<size_t>(i)] = saved - step;
    const double f_minus = loss().item();
    t.mutable_data()[static_cast<size_t>(i)] = saved;

    const double num = (f_plus - f_minus) / (2.0 * step);
    const double ana = analytic == nullptr ? 0.0 : analytic->data()[static_cast<size_t>(i)];
    const double rel = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
    ++rpt.coords_checked;
    if (rel > rpt.max_rel_err) {
      rpt.max_rel_err = rel;
      rpt.worst_param = name;
      rpt.worst_index = i;
      rpt.analytic = ana;
      rpt.numeric = num;
    }
  }
}

/// The probe only makes sense for a pure function of the checked values.
void require_deterministic(const LossFn& loss) {
  const double a = loss().item();
  const double b = loss().item();
  if (!(a == b))
    throw StateError(msg("loss function is not deterministic: ", a, " vs ", b));
}

}  // namespace

double grad_check(const std::vector<std::pair<std::string, Tensor*>>& params,
                  const LossFn& loss, double step, GradCheckReport* report,
                  int max_coords_per_param, uint64_t sample_seed) {
  if (step <= 0.0) throw ContractError("grad_check step must be positive");
  require_deterministic(loss);

  std::vector<Tensor> analytic;
  {
    Tape tape;
    for (auto& [name, t] : params) tape.watch(*t);
    GradStore grads = tape.backward(loss());
    for (auto& [name, t] : params) {
      analytic.push_back(grads.at(*t));
      t->set_node(-1);
    }
  }

  GradCheckReport rpt;
  for (size_t p = 0; p < params.size(); ++p)
    probe_tensor(params[p].first, *params[p].second, &analytic[p], loss, step,
                 max_coords_per_param, sample_seed, rpt);
  if (report) *report = rpt;
  return rpt.max_rel_err;
}

double grad_check_store(ParamStore& store, const LossFn& loss, double step,
                        GradCheckReport* report, int max_coords_per_param,
                        uint64_t sample_seed) {
  if (step <= 0.0) throw ContractError("grad_check step must be positive");
  require_deterministic(loss);

  std::map<std::string, Tensor> analytic;
  {
    Tape tape;
    GradStore grads = tape.backward(loss());
    for (const auto& name : store.names()) {
      const int node = store.cached_node(name);
      if (node >= 0) analytic.emplace(name, grads.at_node(node));
    }
  }

  GradCheckReport rpt;
  for (const auto& name : store.names()) {
    auto it = analytic.find(name);
    probe_tensor(name, store.raw(name), it == analytic.end() ? nullptr : &it->second, loss, step,
                 max_coords_per_param, sample_seed, rpt);
  }
  if (report) *report = rpt;
  return rpt.max_rel_err;
}

}  // namespace tmt
