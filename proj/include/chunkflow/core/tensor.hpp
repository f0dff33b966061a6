#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "chunkflow/core/rng.hpp"

namespace chunkflow {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Storage is aligned to the widest SIMD packet so Eigen kernels take the
/// same code path whatever the allocation address; results stay bitwise stable.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dense row-major array of doubles. A value type: copies are deep.
struct Tensor {
  Shape shape;
  Storage data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, Storage values);
  Tensor(Shape s, const std::vector<double>& values);
  Tensor(Shape s, std::initializer_list<double> values) : Tensor(std::move(s), Storage(values)) {}

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi);

  Index numel() const { return static_cast<Index>(data.size()); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  /// Size of axis `axis`; negative values count from the back.
  Index dim(Index axis) const;
  double item() const;
  bool is_finite() const;

  double& operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }

  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }

  /// Views the data as a (numel/cols) x cols row-major matrix.
  MatrixMap matrix(Index cols);
  ConstMatrixMap matrix(Index cols) const;
  Eigen::Map<Eigen::VectorXd> vector() { return {data.data(), numel()}; }
  Eigen::Map<const Eigen::VectorXd> vector() const { return {data.data(), numel()}; }

  Tensor reshaped(Shape s) const;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace chunkflow
