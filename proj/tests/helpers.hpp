#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "dkua/numerics.hpp"

namespace testing {

inline dkua::Tensor uniform(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  dkua::Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

inline dkua::Tensor random_spd(std::mt19937_64& rng, Eigen::Index dim, double floor = 0.2) {
  const dkua::Tensor a = uniform(rng, dim, dim);
  return a * a.transpose() + floor * dkua::Tensor::Identity(dim, dim);
}

// Fresh directory under the test working directory, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name) : path_(std::filesystem::current_path() / ("scratch_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
