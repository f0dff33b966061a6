#pragma once

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vec6 = Eigen::Matrix<Scalar, 6, 1>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;

/// Rotation by `angle` about `axis`. A zero axis is only allowed with a zero angle.
template <typename Scalar>
Mat3<Scalar> rotation_from_axis_angle(const Vec3<Scalar>& axis, Scalar angle) {
  const Scalar n = axis.norm();
  if (n == Scalar(0)) {
    if (angle != Scalar(0)) throw ContractError("rotation_from_axis_angle: zero axis with nonzero angle");
    return Mat3<Scalar>::Identity();
  }
  return Eigen::AngleAxis<Scalar>(angle, axis / n).toRotationMatrix();
}

/// Rotation vector (axis scaled by angle) to matrix.
template <typename Scalar>
Mat3<Scalar> rotvec_to_matrix(const Vec3<Scalar>& v) {
  const Scalar angle = v.norm();
  if (angle == Scalar(0)) return Mat3<Scalar>::Identity();
  return Eigen::AngleAxis<Scalar>(angle, v / angle).toRotationMatrix();
}

template <typename Scalar>
Vec3<Scalar> matrix_to_rotvec(const Mat3<Scalar>& r) {
  const Eigen::AngleAxis<Scalar> aa(r);
  return aa.axis() * aa.angle();
}

/// First two columns of `r`, column-major.
template <typename Scalar>
Vec6<Scalar> to_6d(const Mat3<Scalar>& r) {
  Vec6<Scalar> out;
  out << r.col(0), r.col(1);
  return out;
}

/// Gram-Schmidt on the two stored columns; the third is their cross product.
template <typename Scalar>
Mat3<Scalar> from_6d(const Vec6<Scalar>& v) {
  const Vec3<Scalar> a = v.template head<3>();
  const Vec3<Scalar> b = v.template tail<3>();
  if (a.norm() == Scalar(0)) throw ContractError("from_6d: zero first column");
  const Vec3<Scalar> e1 = a.normalized();
  const Vec3<Scalar> b2 = b - e1.dot(b) * e1;
  if (b2.norm() == Scalar(0)) throw ContractError("from_6d: columns are parallel");
  const Vec3<Scalar> e2 = b2.normalized();
  Mat3<Scalar> r;
  r << e1, e2, e1.cross(e2);
  return r;
}

template <typename Scalar>
bool is_rotation(const Mat3<Scalar>& r, Scalar tol = Scalar(1e-6)) {
  const Scalar ortho = (r.transpose() * r - Mat3<Scalar>::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(r.determinant() - Scalar(1)) <= tol;
}

/// Angle of the relative rotation r1^T r2, in radians. Uses atan2 of its sine
/// (from the skew part) and cosine (from the trace), which equals the clamped
/// arccos of the cosine but keeps full precision near zero.
template <typename Scalar>
Scalar rotation_geodesic(const Mat3<Scalar>& r1, const Mat3<Scalar>& r2) {
  if (!is_rotation(r1) || !is_rotation(r2)) throw ContractError("rotation_geodesic: input is not a rotation");
  const Mat3<Scalar> m = r1.transpose() * r2;
  const Scalar c = (m.trace() - Scalar(1)) / Scalar(2);
  const Vec3<Scalar> w(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  return std::atan2(w.norm() / Scalar(2), c);
}

}  // namespace chunkflow
