#pragma once

// Closed-form ground-truth trajectories. Every quantity (pose, velocity,
// acceleration, body rate) comes from analytic derivatives so the IMU
// signal is exact up to floating point.

#include "dynafuse/imu.hpp"
#include "dynafuse/so3.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynafuse {

enum class TrajectoryKind { kConstantTwist, kSinusoid, kFigureEight };

inline std::string to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::kConstantTwist: return "constant-twist";
    case TrajectoryKind::kSinusoid: return "sinusoid";
    case TrajectoryKind::kFigureEight: return "figure-eight";
  }
  return "unknown";
}

inline TrajectoryKind trajectory_kind_from_string(const std::string& s) {
  if (s == "constant-twist") return TrajectoryKind::kConstantTwist;
  if (s == "sinusoid") return TrajectoryKind::kSinusoid;
  if (s == "figure-eight") return TrajectoryKind::kFigureEight;
  throw std::invalid_argument("unknown trajectory kind '" + s + "'");
}

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::kSinusoid;
  double duration = 20.0;   ///< s
  double imu_rate = 100.0;  ///< Hz
  double cam_rate = 10.0;   ///< Hz

  Vec3 p0 = Vec3::Zero();
  Vec3 rpy0 = Vec3::Zero();  ///< roll, pitch, yaw (rad), ZYX convention

  // sinusoid / figure-eight
  Vec3 velocity = Vec3(5.0, 0.0, 0.0);  ///< mean world velocity
  Vec3 position_amplitude = Vec3(0.5, 0.3, 0.2);
  double position_frequency = 0.2;  ///< Hz
  Vec3 attitude_amplitude = Vec3(0.02, 0.02, 0.05);
  double attitude_frequency = 0.15;  ///< Hz

  // constant-twist, body frame
  Vec3 twist_linear = Vec3(5.0, 0.0, 0.0);
  Vec3 twist_angular = Vec3::Zero();

  std::uint64_t seed = 0;  ///< draws the sinusoid phases

  void validate() const {
    if (!(duration > 0.0)) throw std::invalid_argument("trajectory duration must be positive");
    if (!(cam_rate >= 1.0)) throw std::invalid_argument("cam_rate must be at least 1 Hz");
    if (!(imu_rate >= cam_rate)) throw std::invalid_argument("imu_rate must be >= cam_rate");
    const double ratio = imu_rate / cam_rate;
    if (std::abs(ratio - std::round(ratio)) > 1e-9) {
      throw std::invalid_argument("imu_rate must be an integer multiple of cam_rate");
    }
    if (!(position_frequency >= 0.0 && attitude_frequency >= 0.0)) {
      throw std::invalid_argument("trajectory frequencies must be non-negative");
    }
    if (!p0.allFinite() || !rpy0.allFinite() || !velocity.allFinite() ||
        !position_amplitude.allFinite() || !attitude_amplitude.allFinite() ||
        !twist_linear.allFinite() || !twist_angular.allFinite()) {
      throw std::invalid_argument("trajectory parameters must be finite");
    }
  }

  int imu_per_frame() const { return static_cast<int>(std::lround(imu_rate / cam_rate)); }
  int frame_count() const { return static_cast<int>(std::floor(duration * cam_rate + 1e-9)); }
  int sample_count() const { return frame_count() * imu_per_frame() + 1; }
};

/// Ground truth at one instant. `a` is the world acceleration, `w_b` the
/// body-frame angular rate.
struct TrajectoryPoint {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 a = Vec3::Zero();
  Mat3 R_wb = Mat3::Identity();
  Vec3 w_b = Vec3::Zero();

  WorldState world_state(const Vec3& g_w = default_gravity_world()) const {
    return {p, v, quat_from_rot(R_wb), g_w, t};
  }
  /// Accelerometer reading without bias or noise.
  Vec3 specific_force(const Vec3& g_w = default_gravity_world()) const {
    return R_wb.transpose() * (a + g_w);
  }
};

namespace detail {

/// x = A sin(ωt + φ) with its first two derivatives.
struct Wave {
  double x, dx, ddx;
};

inline Wave wave(double amp, double freq_hz, double phase, double t) {
  const double w = 2.0 * std::numbers::pi * freq_hz;
  const double s = std::sin(w * t + phase), c = std::cos(w * t + phase);
  return {amp * s, amp * w * c, -amp * w * w * s};
}

inline Mat3 rot_x(double a) {
  Mat3 r;
  r << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return r;
}
inline Mat3 rot_y(double a) {
  Mat3 r;
  r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return r;
}
inline Mat3 rot_z(double a) {
  Mat3 r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

/// R = Rz(yaw)·Ry(pitch)·Rx(roll) and the body rate for the given Euler rates.
inline void euler_zyx(const Vec3& rpy, const Vec3& rpy_dot, Mat3& r, Vec3& w_b) {
  const double ph = rpy.x(), th = rpy.y(), ps = rpy.z();
  r = rot_z(ps) * rot_y(th) * rot_x(ph);
  const double sp = std::sin(ph), cp = std::cos(ph), st = std::sin(th), ct = std::cos(th);
  w_b = Vec3(rpy_dot.x() - rpy_dot.z() * st,
             rpy_dot.y() * cp + rpy_dot.z() * ct * sp,
             -rpy_dot.y() * sp + rpy_dot.z() * ct * cp);
}

/// Σ_{n≥0} τ^{n+k} [ω]^n / (n+k)!  (k = 1: τ·J_l(ωτ); k = 2: its integral).
inline Mat3 twist_series(const Vec3& w, double tau, int k) {
  const Mat3 h = hat(w);
  Mat3 term = Mat3::Identity();
  double coeff = 1.0;
  for (int i = 1; i <= k; ++i) coeff *= tau / i;
  Mat3 sum = coeff * term;
  for (int n = 1; n < 40; ++n) {
    term = term * h;
    coeff *= tau / (n + k);
    const Mat3 add = coeff * term;
    sum += add;
    if (add.cwiseAbs().maxCoeff() < 1e-18 * (1.0 + sum.cwiseAbs().maxCoeff())) break;
  }
  return sum;
}

}  // namespace detail

/// Phases for the six sinusoidal channels (3 position, 3 attitude).
struct TrajectoryPhases {
  Vec3 position = Vec3::Zero();
  Vec3 attitude = Vec3::Zero();

  static TrajectoryPhases draw(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    TrajectoryPhases p;
    for (int i = 0; i < 3; ++i) p.position[i] = u(rng);
    for (int i = 0; i < 3; ++i) p.attitude[i] = u(rng);
    return p;
  }
};

inline TrajectoryPoint trajectory_at(const TrajectorySpec& spec, const TrajectoryPhases& ph,
                                     double t) {
  TrajectoryPoint out;
  out.t = t;
  const Mat3 r0 = detail::rot_z(spec.rpy0.z()) * detail::rot_y(spec.rpy0.y()) *
                  detail::rot_x(spec.rpy0.x());

  if (spec.kind == TrajectoryKind::kConstantTwist) {
    const Vec3& w = spec.twist_angular;
    out.R_wb = r0 * exp_so3(w * t);
    out.p = spec.p0 + r0 * detail::twist_series(w, t, 1) * spec.twist_linear;
    out.v = out.R_wb * spec.twist_linear;
    out.a = out.R_wb * hat(w) * spec.twist_linear;
    out.w_b = w;
    return out;
  }

  // Per-axis frequency multipliers keep the channels from moving in lockstep.
  const Vec3 pos_mult = spec.kind == TrajectoryKind::kFigureEight ? Vec3(1.0, 2.0, 1.0)
                                                                   : Vec3(1.0, 1.3, 0.7);
  Vec3 amp = spec.position_amplitude;
  if (spec.kind == TrajectoryKind::kFigureEight) amp.y() *= 0.5;
  out.p = spec.p0 + spec.velocity * t;
  out.v = spec.velocity;
  out.a = Vec3::Zero();
  for (int i = 0; i < 3; ++i) {
    const auto w = detail::wave(amp[i], spec.position_frequency * pos_mult[i], ph.position[i], t);
    out.p[i] += w.x;
    out.v[i] += w.dx;
    out.a[i] += w.ddx;
  }

  const Vec3 att_mult(1.0, 0.8, 1.2);
  Vec3 rpy = spec.rpy0, rpy_dot = Vec3::Zero();
  for (int i = 0; i < 3; ++i) {
    const auto w = detail::wave(spec.attitude_amplitude[i],
                                spec.attitude_frequency * att_mult[i], ph.attitude[i], t);
    rpy[i] += w.x;
    rpy_dot[i] = w.dx;
  }
  detail::euler_zyx(rpy, rpy_dot, out.R_wb, out.w_b);
  return out;
}

inline TrajectoryPoint trajectory_at(const TrajectorySpec& spec, double t) {
  return trajectory_at(spec, TrajectoryPhases::draw(spec.seed), t);
}

/// Dense samples at t_i = i / imu_rate covering the whole spec.
inline std::vector<TrajectoryPoint> generate_trajectory(const TrajectorySpec& spec) {
  spec.validate();
  const auto ph = TrajectoryPhases::draw(spec.seed);
  const int n = spec.sample_count();
  std::vector<TrajectoryPoint> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(trajectory_at(spec, ph, i / spec.imu_rate));
  return out;
}

/// Pose of a camera rigidly attached to the body.
struct CameraPose {
  Mat3 R_wc = Mat3::Identity();
  Vec3 p_wc = Vec3::Zero();
};

inline CameraPose camera_pose(const TrajectoryPoint& pt, const Extrinsics& ex) {
  return {pt.R_wb * ex.R_bc(), pt.p + pt.R_wb * ex.p_bc()};
}

/// T_{c_a c_b}: maps points in c_b into c_a.
inline CameraEgoMotion relative_motion(const CameraPose& a, const CameraPose& b) {
  return {a.R_wc.transpose() * b.R_wc, a.R_wc.transpose() * (b.p_wc - a.p_wc), std::nullopt};
}

}  // namespace dynafuse
