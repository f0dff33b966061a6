#include "chunkflow/core/tensor.hpp"

#include <cmath>
#include <sstream>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {}

Tensor::Tensor(Shape s, const std::vector<double>& values) : Tensor(std::move(s), Storage(values.begin(), values.end())) {}

Tensor::Tensor(Shape s, Storage values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::randn(Shape s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = stddev * rng.normal();
  return t;
}

Tensor Tensor::uniform(Shape s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

Index Tensor::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  return shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape));
  return data[0];
}

bool Tensor::is_finite() const {
  for (double x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

MatrixMap Tensor::matrix(Index cols) {
  if (cols <= 0 || numel() % cols != 0) {
    throw DimensionError("cannot view " + shape_string(shape) + " with " + std::to_string(cols) + " columns");
  }
  return {data.data(), numel() / cols, cols};
}

ConstMatrixMap Tensor::matrix(Index cols) const {
  if (cols <= 0 || numel() % cols != 0) {
    throw DimensionError("cannot view " + shape_string(shape) + " with " + std::to_string(cols) + " columns");
  }
  return {data.data(), numel() / cols, cols};
}

Tensor Tensor::reshaped(Shape s) const {
  Tensor out = *this;
  if (shape_numel(s) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape) + " to " + shape_string(s));
  }
  out.shape = std::move(s);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw DimensionError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace chunkflow
