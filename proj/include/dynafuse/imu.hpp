#pragma once

// IMU measurement model, midpoint integration of the strapdown dynamics, and
// preintegration with conversion to camera-centric ego-motion.
//
// Conventions: g_w = (0, 0, +9.81) so a level, stationary accelerometer
// reads +9.81 on z. Specific force f = a_m − b_a; world acceleration is
// R_wb·f − g_w.

#include "dynafuse/so3.hpp"

#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynafuse {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline constexpr double kGravity = 9.81;

inline Vec3 default_gravity_world() { return {0.0, 0.0, kGravity}; }

struct ImuSample {
  double t = 0.0;
  Vec3 w_m = Vec3::Zero();  ///< rad/s
  Vec3 a_m = Vec3::Zero();  ///< m/s²
};

struct ImuBias {
  Vec3 b_w = Vec3::Zero();
  Vec3 b_a = Vec3::Zero();
};

/// Continuous-time noise densities.
struct ImuNoiseParams {
  double sigma_w = 0.0;   ///< rad/s/√Hz
  double sigma_bw = 0.0;  ///< rad/s²/√Hz
  double sigma_a = 0.0;   ///< m/s²/√Hz
  double sigma_ba = 0.0;  ///< m/s³/√Hz

  static ImuNoiseParams consumer_grade() { return {1.7e-4, 2e-5, 2e-3, 3e-3}; }

  void validate() const {
    if (!(sigma_w >= 0 && sigma_bw >= 0 && sigma_a >= 0 && sigma_ba >= 0)) {
      throw std::invalid_argument("IMU noise densities must be non-negative");
    }
  }
};

struct WorldState {
  Vec3 p_wb = Vec3::Zero();
  Vec3 v_w = Vec3::Zero();
  Quaternion q_wb;
  Vec3 g_w = default_gravity_world();
  double t = 0.0;
};

/// α, β, q accumulated in the IMU frame at the start of the window.
struct PreintegratedDelta {
  Vec3 alpha = Vec3::Zero();
  Vec3 beta = Vec3::Zero();
  Quaternion q_bibj;
  double dt_total = 0.0;
};

/// Rigid transform between IMU body frame b and camera frame c.
class Extrinsics {
 public:
  Extrinsics() = default;
  Extrinsics(const Mat3& r_cb, const Vec3& p_bc) : r_cb_(r_cb), p_bc_(p_bc) {
    require_rotation(r_cb);
  }

  static Extrinsics identity() { return {}; }

  const Mat3& R_cb() const { return r_cb_; }
  Mat3 R_bc() const { return r_cb_.transpose(); }
  const Vec3& p_bc() const { return p_bc_; }
  Vec3 p_cb() const { return -r_cb_ * p_bc_; }

 private:
  Mat3 r_cb_ = Mat3::Identity();
  Vec3 p_bc_ = Vec3::Zero();
};

/// Relative transform of camera frame c_{k+1} expressed in c_k.
struct CameraEgoMotion {
  Mat3 R = Mat3::Identity();
  Vec3 p = Vec3::Zero();
  std::optional<Mat6> cov;  ///< over (δφ, δp)

  CameraEgoMotion inverse() const { return {R.transpose(), -R.transpose() * p, std::nullopt}; }
  CameraEgoMotion compose(const CameraEgoMotion& o) const {
    return {R * o.R, R * o.p + p, std::nullopt};
  }
};

/// One IMU reading from the measurement model
///   w_m = w_b + b_w + n_g,   a_m = R_bw (a_w + g_w) + b_a + n_a
/// with discrete noise std σ·√rate.
template <class Rng>
ImuSample simulate_measurement(const WorldState& state, const Vec3& a_w, const Vec3& w_b,
                               const ImuBias& bias, const ImuNoiseParams& noise, double rate,
                               Rng& rng) {
  if (!(rate > 0.0)) throw std::invalid_argument("IMU rate must be positive");
  noise.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sw = noise.sigma_w * std::sqrt(rate);
  const double sa = noise.sigma_a * std::sqrt(rate);
  Vec3 ng, na;
  for (int i = 0; i < 3; ++i) ng[i] = sw * normal(rng);
  for (int i = 0; i < 3; ++i) na[i] = sa * normal(rng);

  const Mat3 r_bw = rot_from_quat(state.q_wb).transpose();
  ImuSample s;
  s.t = state.t;
  s.w_m = w_b + bias.b_w + ng;
  s.a_m = r_bw * (a_w + state.g_w) + bias.b_a + na;
  return s;
}

inline ImuSample simulate_measurement(const WorldState& state, const Vec3& a_w, const Vec3& w_b,
                                      const ImuBias& bias, const ImuNoiseParams& noise,
                                      double rate, std::uint64_t rng_seed) {
  std::mt19937_64 rng(rng_seed);
  return simulate_measurement(state, a_w, w_b, bias, noise, rate, rng);
}

inline void validate_sequence(std::span<const ImuSample> samples, std::size_t min_count) {
  if (samples.size() < min_count) {
    throw std::invalid_argument("IMU sequence needs at least " + std::to_string(min_count) +
                                " samples, got " + std::to_string(samples.size()));
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!std::isfinite(s.t) || !s.w_m.allFinite() || !s.a_m.allFinite()) {
      throw std::invalid_argument("non-finite IMU sample at index " + std::to_string(i));
    }
    if (i > 0 && !(s.t > samples[i - 1].t)) {
      throw std::invalid_argument("IMU timestamps not strictly increasing at index " +
                                  std::to_string(i));
    }
  }
}

namespace detail {

/// Average of the endpoint rates/forces over one interval, bias removed.
inline Vec3 mean_rate(const ImuSample& s0, const ImuSample& s1, const Vec3& b_w) {
  return 0.5 * (s0.w_m + s1.w_m) - b_w;
}

}  // namespace detail

/// Midpoint step of (R, p, v) in a non-rotating frame where the gravity
/// reaction is `g`: R advances by the averaged body rate, and the
/// acceleration is the average of R·f − g at both endpoints.
inline void midpoint_step(Quaternion& q, Vec3& p, Vec3& v, const Vec3& g, const ImuSample& s0,
                          const ImuSample& s1, const ImuBias& bias) {
  const double dt = s1.t - s0.t;
  const Mat3 r0 = rot_from_quat(q);
  q = quat_integrate(q, detail::mean_rate(s0, s1, bias.b_w), dt);
  const Mat3 r1 = rot_from_quat(q);
  const Vec3 acc = 0.5 * (r0 * (s0.a_m - bias.b_a) + r1 * (s1.a_m - bias.b_a)) - g;
  p += v * dt + 0.5 * acc * dt * dt;
  v += acc * dt;
}

inline void midpoint_step(Mat3& r, Vec3& p, Vec3& v, const Vec3& g, const ImuSample& s0,
                          const ImuSample& s1, const ImuBias& bias) {
  const double dt = s1.t - s0.t;
  const Mat3 r0 = r;
  r = r0 * exp_so3(detail::mean_rate(s0, s1, bias.b_w) * dt);
  const Vec3 acc = 0.5 * (r0 * (s0.a_m - bias.b_a) + r * (s1.a_m - bias.b_a)) - g;
  p += v * dt + 0.5 * acc * dt * dt;
  v += acc * dt;
}

/// Integrate the world-frame dynamics across `samples`. The input state is
/// taken to be at samples.front().t.
inline WorldState integrate_dynamics(const WorldState& state, std::span<const ImuSample> samples,
                                     const ImuBias& bias) {
  validate_sequence(samples, 1);
  WorldState out = state;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    midpoint_step(out.q_wb, out.p_wb, out.v_w, out.g_w, samples[i - 1], samples[i], bias);
  }
  out.t = samples.back().t;
  return out;
}

/// α, β, q over the window spanned by `samples`; uses no world quantity.
inline PreintegratedDelta preintegrate(std::span<const ImuSample> samples, const ImuBias& bias) {
  validate_sequence(samples, 2);
  PreintegratedDelta d;
  const Vec3 zero = Vec3::Zero();
  for (std::size_t i = 1; i < samples.size(); ++i) {
    midpoint_step(d.q_bibj, d.alpha, d.beta, zero, samples[i - 1], samples[i], bias);
  }
  d.dt_total = samples.back().t - samples.front().t;
  return d;
}

/// Camera-centric ego-motion from a preintegrated delta, given the body
/// velocity and gravity reaction expressed in the camera frame c_k.
inline CameraEgoMotion to_camera_frame(const PreintegratedDelta& delta, const Extrinsics& ex,
                                       const Vec3& v_ck, const Vec3& g_ck) {
  if (!(delta.dt_total > 0.0)) throw std::invalid_argument("delta.dt_total must be positive");
  const double dt = delta.dt_total;
  CameraEgoMotion m;
  m.R = ex.R_cb() * rot_from_quat(delta.q_bibj) * ex.R_bc();
  const Vec3 lever = ex.R_cb() * ex.p_bc();
  m.p = ex.R_cb() * delta.alpha + m.R * lever - lever + v_ck * dt - 0.5 * g_ck * dt * dt;
  return m;
}

// CSV rows `t,wx,wy,wz,ax,ay,az`.

inline void write_imu_csv(std::ostream& os, std::span<const ImuSample> samples) {
  os << "t,wx,wy,wz,ax,ay,az\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& s : samples) {
    os << s.t << ',' << s.w_m.x() << ',' << s.w_m.y() << ',' << s.w_m.z() << ',' << s.a_m.x()
       << ',' << s.a_m.y() << ',' << s.a_m.z() << '\n';
  }
}

inline std::vector<ImuSample> read_imu_csv(std::istream& is) {
  std::vector<ImuSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("t,", 0) == 0) continue;
    std::stringstream ss(line);
    double vals[7];
    for (int i = 0; i < 7; ++i) {
      std::string cell;
      if (!std::getline(ss, cell, ',')) {
        throw std::invalid_argument("IMU CSV line " + std::to_string(lineno) +
                                    ": expected 7 columns");
      }
      try {
        vals[i] = std::stod(cell);
      } catch (const std::exception&) {
        throw std::invalid_argument("IMU CSV line " + std::to_string(lineno) +
                                    ": bad number '" + cell + "'");
      }
    }
    out.push_back({vals[0], Vec3(vals[1], vals[2], vals[3]), Vec3(vals[4], vals[5], vals[6])});
  }
  validate_sequence(out, 1);
  return out;
}

}  // namespace dynafuse
