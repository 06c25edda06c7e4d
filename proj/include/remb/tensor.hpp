#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace remb::ad {

// Dense rank-1..3 tensor of 64-bit reals, row-major.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> shp, std::vector<double> d);

  static Tensor zeros(std::vector<int> shp);
  static Tensor full(std::vector<int> shp, double v);
  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> d);
  static Tensor matrix(int rows, int cols, std::vector<double> d);

  int rank() const { return static_cast<int>(shape.size()); }
  std::size_t numel() const { return data.size(); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  // Throws a numeric error if any entry is NaN/Inf. `where` names the op.
  void ensure_finite(const char* where) const;
};

bool all_finite(const Tensor& t);

}  // namespace remb::ad
