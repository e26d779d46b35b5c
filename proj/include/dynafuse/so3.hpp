#pragma once

// Rotation-group primitives: skew maps, SO(3) exp/log, left Jacobian, and
// Hamilton quaternions stored as (w, x, y, z).

#include <Eigen/Core>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dynafuse {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Axis-angle coordinates in so(3).
using So3Vector = Eigen::Vector3d;
using RotationMatrix = Eigen::Matrix3d;

inline constexpr double kSmallAngle = 1e-6;

/// Thrown for numerically degenerate inputs (non-orthonormal rotations,
/// non-PSD covariances, singular innovation covariances).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return Vec3(m(2, 1), m(0, 2), m(1, 0)); }

/// Max elementwise deviation of RᵀR from I, and of det(R) from 1.
inline double orthonormality_error(const Mat3& r) {
  const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  return std::max(ortho, std::abs(r.determinant() - 1.0));
}

inline void require_rotation(const Mat3& r, double tol = 1e-6) {
  if (!r.allFinite() || orthonormality_error(r) > tol) {
    throw NumericError("rotation matrix is not orthonormal (error " +
                       std::to_string(orthonormality_error(r)) + ")");
  }
}

/// Rodrigues' formula; second-order series below kSmallAngle.
inline RotationMatrix exp_so3(const So3Vector& v) {
  const double theta = v.norm();
  const Mat3 k = hat(v);
  if (theta < kSmallAngle) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * k + b * k * k;
}

/// Canonical logarithm with ‖result‖ ≤ π. Near θ = π the axis is taken from
/// the dominant column of the symmetric part, since sin θ carries no
/// information there.
inline So3Vector log_so3(const RotationMatrix& r) {
  require_rotation(r);
  const Vec3 s = 0.5 * vee(r - r.transpose());  // sin(θ)·axis
  const double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
  const double sin_theta = s.norm();
  const double theta = std::atan2(sin_theta, c);

  if (theta < kSmallAngle) {
    // θ/sinθ ≈ 1 + θ²/6
    return (1.0 + theta * theta / 6.0) * s;
  }
  if (std::numbers::pi - theta > 1e-3) {
    return (theta / sin_theta) * s;
  }
  // (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·aaᵀ
  const Mat3 sym = 0.5 * (r + r.transpose()) - c * Mat3::Identity();
  Eigen::Index col = 0;
  sym.diagonal().maxCoeff(&col);
  Vec3 axis = sym.col(col) / std::sqrt(std::max(sym(col, col), 1e-300));
  axis.normalize();
  if (axis.dot(s) < 0.0) axis = -axis;
  return theta * axis;
}

/// J_l(φ) = Σ [φ]^n / (n+1)!, closed form.
inline Mat3 left_jacobian(const So3Vector& v) {
  const double theta = v.norm();
  const Mat3 k = hat(v);
  if (theta < kSmallAngle) {
    return Mat3::Identity() + 0.5 * k + (1.0 / 6.0) * k * k;
  }
  const double t2 = theta * theta;
  return Mat3::Identity() + ((1.0 - std::cos(theta)) / t2) * k +
         ((theta - std::sin(theta)) / (t2 * theta)) * k * k;
}

/// J_l(φ)^{-1} = I − ½[φ]^ + (1/θ² − (1+cosθ)/(2θ sinθ))[φ]^².
/// Requires ‖φ‖ < 2π.
inline Mat3 left_jacobian_inv(const So3Vector& v) {
  const double theta = v.norm();
  const Mat3 k = hat(v);
  if (theta < kSmallAngle) {
    return Mat3::Identity() - 0.5 * k + (1.0 / 12.0) * k * k;
  }
  const double coeff = 1.0 / (theta * theta) -
                       (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() - 0.5 * k + coeff * k * k;
}

inline Mat3 right_jacobian(const So3Vector& v) { return left_jacobian(-v); }
inline Mat3 right_jacobian_inv(const So3Vector& v) { return left_jacobian_inv(-v); }

/// Unit Hamilton quaternion, storage order (w, x, y, z).
struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quaternion identity() { return {}; }

  Vec3 vec() const { return {x, y, z}; }
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Quaternion conj() const { return {w, -x, -y, -z}; }

  /// Normalize and flip into the w ≥ 0 hemisphere.
  Quaternion canonical() const {
    const double n = norm();
    const double s = (w < 0.0 ? -1.0 : 1.0) / n;
    return {w * s, x * s, y * s, z * s};
  }
};

inline Quaternion quat_mul(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

inline RotationMatrix rot_from_quat(const Quaternion& q) {
  const double n = q.norm();
  const double w = q.w / n, x = q.x / n, y = q.y / n, z = q.z / n;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Shepperd's method: pick the largest of (trace, diagonal) as the pivot.
inline Quaternion quat_from_rot(const RotationMatrix& r) {
  require_rotation(r);
  const double tr = r.trace();
  Quaternion q;
  if (tr >= r(0, 0) && tr >= r(1, 1) && tr >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return q.canonical();
}

/// Quaternion of the rotation exp_so3(v).
inline Quaternion quat_exp(const So3Vector& v) {
  const double theta = v.norm();
  if (theta < kSmallAngle) {
    const Vec3 h = 0.5 * v;
    return Quaternion{1.0 - 0.125 * theta * theta, h.x(), h.y(), h.z()}.canonical();
  }
  const double s = std::sin(0.5 * theta) / theta;
  return {std::cos(0.5 * theta), s * v.x(), s * v.y(), s * v.z()};
}

/// Exact exponential update of q̇ = q ⊗ [0, ½w] under constant body rate.
inline Quaternion quat_integrate(const Quaternion& q, const Vec3& w, double dt) {
  return quat_mul(q, quat_exp(w * dt)).canonical();
}

}  // namespace dynafuse
