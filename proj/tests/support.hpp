#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "learn/random.hpp"

namespace testing {

// Central differences of a scalar function of a matrix.
inline Eigen::MatrixXd numeric_grad(const std::function<double(const Eigen::MatrixXd&)>& f, Eigen::MatrixXd x,
                                    double h = 1e-4) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-6});
  return (a - b).norm() / scale;
}

// Fresh scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("learn_" + tag + "_" + std::to_string(learn::mix_seed(std::random_device{}(), 0)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
