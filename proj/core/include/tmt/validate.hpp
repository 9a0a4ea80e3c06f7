#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tmt {

struct ValidationCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Finite-difference audit of every layer family (central differences,
/// step 1e-5, tolerance 1e-5), each on a small randomized fixture.
std::vector<ValidationCase> grad_check_layers(uint64_t seed);

/// The same audit over every parameter of the full model, driven by the
/// multi-task loss on a two-example synthetic batch (one example with
/// dialog history, one without, so all branches participate).
ValidationCase grad_check_model(uint64_t seed);

}  // namespace tmt
