#pragma once

#include <doctest.h>

#include <filesystem>
#include <string>

#include <unistd.h>

#include "clinfuse/rng.hpp"
#include "clinfuse/tensor.hpp"

namespace testing {

using clinfuse::Index;
using clinfuse::Shape;
using clinfuse::Tensor;

inline Tensor random_tensor(clinfuse::Rng& rng, Shape shape, bool grad = false, double scale = 1.0) {
  Eigen::VectorXd v(clinfuse::shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v(i) = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), grad);
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("clinfuse_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
