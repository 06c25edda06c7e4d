#include "remb/tensor.hpp"

#include <cmath>
#include <sstream>

#include "remb/error.hpp"

namespace remb::ad {

namespace {

std::size_t checked_numel(const std::vector<int>& shp) {
  if (shp.empty() || shp.size() > 3) {
    data_error("tensor rank must be 1..3, got " + std::to_string(shp.size()));
  }
  std::size_t n = 1;
  for (int d : shp) {
    if (d <= 0) data_error("tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shp, std::vector<double> d) : shape(std::move(shp)), data(std::move(d)) {
  if (checked_numel(shape) != data.size()) {
    data_error("tensor shape " + shape_str() + " does not match data length " + std::to_string(data.size()));
  }
}

Tensor Tensor::zeros(std::vector<int> shp) {
  std::size_t n = checked_numel(shp);
  Tensor t;
  t.shape = std::move(shp);
  t.data.assign(n, 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shp, double v) {
  Tensor t = zeros(std::move(shp));
  for (double& x : t.data) x = v;
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vector(std::vector<double> d) {
  int n = static_cast<int>(d.size());
  return Tensor({n}, std::move(d));
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> d) { return Tensor({rows, cols}, std::move(d)); }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

void Tensor::ensure_finite(const char* where) const {
  if (!all_finite(*this)) {
    numeric_error(std::string("non-finite value in ") + where);
  }
}

bool all_finite(const Tensor& t) {
  for (double x : t.data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace remb::ad
