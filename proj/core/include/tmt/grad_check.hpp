#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tmt/tensor.hpp"

namespace tmt {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t coords_checked = 0;
};

/// Scalar loss evaluated from the current values of the checked tensors.
/// Must re-read them on every call; it runs both under a tape (analytic
/// pass) and without one (finite-difference evaluations).
using LossFn = std::function<Tensor()>;

/// Compares analytic gradients against central finite differences:
/// rel_err = |a - n| / max(1e-8, |a| + |n|). When `max_coords_per_param`
/// is positive, only that many coordinates per tensor are probed (chosen
/// deterministically from `sample_seed`); otherwise all are. Returns the
/// worst relative error.
double grad_check(const std::vector<std::pair<std::string, Tensor*>>& params,
                  const LossFn& loss, double step, GradCheckReport* report = nullptr,
                  int max_coords_per_param = -1, uint64_t sample_seed = 0);

class ParamStore;

/// Same comparison for every parameter of a store. The loss must read
/// parameters through ParamStore::use so the analytic pass reaches them;
/// parameters the loss never touches are still probed numerically against
/// an analytic gradient of zero.
double grad_check_store(ParamStore& store, const LossFn& loss, double step,
                        GradCheckReport* report = nullptr, int max_coords_per_param = -1,
                        uint64_t sample_seed = 0);

}  // namespace tmt
