#pragma once

// Shared scaffolding for the test binaries.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <unistd.h>

#include "tmt/nn.hpp"
#include "tmt/rng.hpp"
#include "tmt/tensor.hpp"

namespace testutil {

/// Scratch directory under the system temp root, removed on destruction.
/// pid + counter keeps concurrently running test binaries apart.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto base = std::filesystem::temp_directory_path();
    path_ = (base / ("tmt_test_" + std::to_string(::getpid()) + "_" +
                     std::to_string(counter.fetch_add(1))))
                .string();
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const {
    return (std::filesystem::path(path_) / name).string();
  }

 private:
  std::string path_;
};

inline tmt::Tensor random_tensor(tmt::Shape shape, tmt::Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
  tmt::Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

/// Random values with |v| >= margin, for kernels with a kink at zero
/// (relu, abs) probed by finite differences.
inline tmt::Tensor random_away_from_zero(tmt::Shape shape, tmt::Rng& rng,
                                         double margin = 0.05) {
  tmt::Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) {
    const double mag = rng.uniform(margin, 1.0);
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

/// Nudges every parameter off its init point; zero biases and unit gains
/// are degenerate spots for finite-difference probing.
inline void jitter_params(tmt::ParamStore& store, uint64_t seed, double sigma = 0.25) {
  tmt::Rng rng(seed);
  for (const auto& name : store.names())
    for (double& v : store.raw(name).mutable_data()) v += sigma * rng.normal();
}

inline bool bitwise_equal(const tmt::Tensor& a, const tmt::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(),
                     a.data().size() * sizeof(double)) == 0;
}

inline double max_abs_diff(const tmt::Tensor& a, const tmt::Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

}  // namespace testutil
