#pragma once

// Finite-difference verification of the filter linearizations (F, H, J_l⁻¹)
// and the preintegration accuracy check.

#include "dynafuse/ekf.hpp"
#include "dynafuse/harness.hpp"
#include "dynafuse/trajectory.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace dynafuse {

// ---------------------------------------------------------------------------
// Exact constant-input model used as the finite-difference reference

/// Solution of Ṙ = R[ω]^, ṗ = v, v̇ = R f − g after time τ (τ may be
/// negative) with ω = w_m − b_w and f = a_m − b_a held constant.
inline NominalState exact_flow(const NominalState& x, const ImuSample& u, double tau) {
  const Vec3 w = u.w_m - x.b_w;
  const Vec3 f = u.a_m - x.b_a;
  NominalState out = x;
  out.R_ckbt = x.R_ckbt * exp_so3(w * tau);
  out.v_ck = x.v_ck + x.R_ckbt * detail::twist_series(w, tau, 1) * f - x.g_ck * tau;
  out.p_ckbt = x.p_ckbt + x.v_ck * tau + x.R_ckbt * detail::twist_series(w, tau, 2) * f -
               0.5 * x.g_ck * tau * tau;
  out.t = x.t + tau;
  return out;
}

struct FdSettings {
  double state_step = 1e-3;
  double time_step = 1e-5;
};

/// δẋ = F δx measured column by column: perturb one error coordinate by ±ε,
/// flow both states ±dt, difference the error in time and then in ε.
inline Mat18 finite_difference_F(const NominalState& nom, const ImuSample& u,
                                 const FdSettings& s = {}) {
  const double eps = s.state_step, dt = s.time_step;
  const NominalState nom_fwd = exact_flow(nom, u, dt);
  const NominalState nom_bwd = exact_flow(nom, u, -dt);
  auto error_rate = [&](const Vec18& dx0) {
    const NominalState x = nom.boxplus(dx0);
    const Vec18 e_fwd = nom_fwd.boxminus(exact_flow(x, u, dt));
    const Vec18 e_bwd = nom_bwd.boxminus(exact_flow(x, u, -dt));
    return Vec18((e_fwd - e_bwd) / (2.0 * dt));
  };
  Mat18 f;
  for (int j = 0; j < 18; ++j) {
    Vec18 d = Vec18::Zero();
    d[j] = eps;
    f.col(j) = (error_rate(d) - error_rate(-d)) / (2.0 * eps);
  }
  return f;
}

/// Central differences of observation_h under x ⊞ (±ε e_j).
inline Mat6x18 finite_difference_H(const NominalState& nom, const Extrinsics& ex,
                                   double eps = 1e-6) {
  Mat6x18 h;
  for (int j = 0; j < 18; ++j) {
    Vec18 d = Vec18::Zero();
    d[j] = eps;
    h.col(j) = (observation_h(nom.boxplus(d), ex) - observation_h(nom.boxplus(-d), ex)) / (2 * eps);
  }
  return h;
}

/// d/dε log(exp(ε e_j)·exp(v)) at ε = 0, which equals J_l(v)^{-1} e_j.
inline Mat3 finite_difference_Jl_inv(const Vec3& v, double eps = 1e-6) {
  Mat3 j;
  const Mat3 r = exp_so3(v);
  for (int c = 0; c < 3; ++c) {
    const Vec3 d = eps * Vec3::Unit(c);
    j.col(c) = (log_so3(exp_so3(d) * r) - log_so3(exp_so3(-d) * r)) / (2 * eps);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Random states

struct RandomCase {
  NominalState nom;
  ImuSample sample;
  Extrinsics ex;
  Vec3 phi = Vec3::Zero();
};

inline Mat3 random_rotation(std::mt19937_64& rng, double max_angle) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, max_angle);
  Vec3 axis(n(rng), n(rng), n(rng));
  axis.normalize();
  return exp_so3(u(rng) * axis);
}

inline RandomCase random_case(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  auto vec = [&](double s) { return Vec3(s * n(rng), s * n(rng), s * n(rng)); };
  RandomCase c;
  c.nom.R_ckbt = random_rotation(rng, 2.5);
  c.nom.p_ckbt = vec(1.0);
  c.nom.v_ck = vec(3.0);
  Vec3 gdir = vec(1.0);
  c.nom.g_ck = kGravity * gdir.normalized();
  c.nom.b_w = vec(0.01);
  c.nom.b_a = vec(0.1);
  c.sample.w_m = vec(0.5);
  c.sample.a_m = c.nom.R_ckbt.transpose() * c.nom.g_ck + vec(2.0);
  c.ex = Extrinsics(random_rotation(rng, 3.0), vec(0.2));
  // Keep the camera-frame relative rotation away from the log cut at π.
  while (log_so3(c.nom.R_ckbt * c.ex.R_bc()).norm() > 2.8) {
    c.ex = Extrinsics(random_rotation(rng, 3.0), vec(0.2));
  }
  std::uniform_real_distribution<double> ang(0.0, 3.0);
  c.phi = ang(rng) * vec(1.0).normalized();
  return c;
}

// ---------------------------------------------------------------------------
// gradcheck

struct MatrixCheck {
  std::string name;
  double max_rel_error = 0.0;
  int worst_case = -1;
  int worst_block_row = 0;  ///< 3×3 block of the largest error in the worst case
  int worst_block_col = 0;
  double worst_block_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::uint64_t seed = 0;
  int cases = 0;
  double tol = 0.0;
  std::array<MatrixCheck, 3> checks;  ///< F, H, Jl_inv
  RandomCase worst;                   ///< case behind the first failing check
  bool passed = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int cases = 100;
  double tol = 1e-4;
  /// Test fixture hook applied to the analytic F before comparison.
  std::function<void(Mat18&)> mutate_F;
};

namespace detail {

template <class A, class B>
void record(MatrixCheck& mc, int case_idx, const A& analytic, const B& numeric) {
  const double denom = std::max(numeric.norm(), 1e-12);
  const double rel = (analytic - numeric).norm() / denom;
  if (rel <= mc.max_rel_error && mc.worst_case >= 0) return;
  mc.max_rel_error = rel;
  mc.worst_case = case_idx;
  mc.worst_block_error = -1.0;
  for (int r = 0; r < analytic.rows(); r += 3) {
    for (int c = 0; c < analytic.cols(); c += 3) {
      const double e = (analytic.template block<3, 3>(r, c) -
                        numeric.template block<3, 3>(r, c)).norm() / denom;
      if (e > mc.worst_block_error) {
        mc.worst_block_error = e;
        mc.worst_block_row = r / 3;
        mc.worst_block_col = c / 3;
      }
    }
  }
}

}  // namespace detail

inline GradcheckReport gradcheck(const GradcheckOptions& opt) {
  if (!(opt.tol > 0.0)) throw std::invalid_argument("gradcheck: tol must be positive");
  if (opt.cases < 1) throw std::invalid_argument("gradcheck: need at least one case");
  GradcheckReport rep;
  rep.seed = opt.seed;
  rep.cases = opt.cases;
  rep.tol = opt.tol;
  rep.checks[0].name = "F";
  rep.checks[1].name = "H";
  rep.checks[2].name = "Jl_inv";

  std::mt19937_64 rng(opt.seed);
  std::vector<RandomCase> cases;
  for (int i = 0; i < opt.cases; ++i) {
    cases.push_back(random_case(rng));
    const auto& c = cases.back();
    Mat18 f = build_F(c.nom, c.sample);
    if (opt.mutate_F) opt.mutate_F(f);
    detail::record(rep.checks[0], i, f, finite_difference_F(c.nom, c.sample));
    detail::record(rep.checks[1], i, observation_H(c.nom, c.ex), finite_difference_H(c.nom, c.ex));
    detail::record(rep.checks[2], i, left_jacobian_inv(c.phi), finite_difference_Jl_inv(c.phi));
  }
  rep.passed = true;
  for (auto& mc : rep.checks) {
    mc.passed = mc.max_rel_error <= opt.tol;
    if (!mc.passed && rep.passed) {
      rep.passed = false;
      rep.worst = cases[static_cast<std::size_t>(mc.worst_case)];
    }
  }
  return rep;
}

/// Names of the 3-blocks of δx, for reports.
inline const char* state_block_name(int b) {
  static constexpr const char* names[] = {"phi", "p", "v", "g", "b_w", "b_a"};
  return b >= 0 && b < 6 ? names[b] : "?";
}

// ---------------------------------------------------------------------------
// preint-check

struct PreintCheckReport {
  double rate = 0.0;
  double duration = 0.0;
  std::uint64_t seed = 0;
  double pos_error_truth = 0.0;  ///< vs analytic pose composition (m)
  double rot_error_truth = 0.0;  ///< rad
  double pos_error_fine = 0.0;   ///< vs 10 kHz integration of the same signal
  double rot_error_fine = 0.0;
  double pos_bound = 1e-4;
  double rot_bound = 1e-5;
  bool passed = false;
};

/// A gentle random trajectory for preintegration checks.
inline TrajectorySpec preint_trajectory(double rate, double duration, std::uint64_t seed) {
  TrajectorySpec s;
  s.kind = TrajectoryKind::kSinusoid;
  s.duration = duration;
  s.imu_rate = rate;
  s.cam_rate = 1.0 / duration;
  s.seed = seed;
  std::mt19937_64 rng(derive_seed(seed, 11, 0));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  s.velocity = Vec3(5.0 * u(rng), 2.0 * u(rng), 0.5 * u(rng));
  s.rpy0 = Vec3(0.1 * u(rng), 0.1 * u(rng), std::numbers::pi * u(rng));
  return s;
}

/// Noise-free IMU samples of `spec` at the given rate over [0, duration].
inline std::vector<ImuSample> sample_imu(const TrajectorySpec& spec, double rate, double duration) {
  const auto ph = TrajectoryPhases::draw(spec.seed);
  const long n = std::lround(duration * rate);
  std::vector<ImuSample> out;
  out.reserve(static_cast<std::size_t>(n) + 1);
  for (long i = 0; i <= n; ++i) {
    const auto pt = trajectory_at(spec, ph, static_cast<double>(i) / rate);
    out.push_back({pt.t, pt.w_b, pt.specific_force()});
  }
  return out;
}

inline PreintCheckReport preint_check(double rate, double duration, std::uint64_t seed,
                                      const Extrinsics& ex = side_looking_extrinsics()) {
  if (!(rate >= 10.0)) throw std::invalid_argument("preint-check: rate must be >= 10 Hz");
  if (!(duration > 0.0)) throw std::invalid_argument("preint-check: duration must be positive");
  const double steps = duration * rate;
  if (std::abs(steps - std::round(steps)) > 1e-6 || std::round(steps) < 1) {
    throw std::invalid_argument("preint-check: duration * rate must be a positive integer");
  }
  constexpr double kFineRate = 10000.0;

  PreintCheckReport rep;
  rep.rate = rate;
  rep.duration = duration;
  rep.seed = seed;
  const auto spec = preint_trajectory(rate, duration, seed);
  const auto ph = TrajectoryPhases::draw(spec.seed);
  const auto start = trajectory_at(spec, ph, 0.0);
  const auto end = trajectory_at(spec, ph, duration);
  const auto pose0 = camera_pose(start, ex), pose1 = camera_pose(end, ex);
  const Mat3 r_c0w = pose0.R_wc.transpose();

  const auto samples = sample_imu(spec, rate, duration);
  const auto delta = preintegrate(samples, ImuBias{});
  const auto ego = to_camera_frame(delta, ex, r_c0w * start.v, r_c0w * default_gravity_world());

  const auto truth = relative_motion(pose0, pose1);
  rep.pos_error_truth = (ego.p - truth.p).norm();
  rep.rot_error_truth = log_so3(truth.R.transpose() * ego.R).norm();

  const auto fine = sample_imu(spec, kFineRate, duration);
  WorldState ws = start.world_state();
  ws = integrate_dynamics(ws, fine, ImuBias{});
  TrajectoryPoint fine_end = end;
  fine_end.p = ws.p_wb;
  fine_end.R_wb = rot_from_quat(ws.q_wb);
  const auto fine_ego = relative_motion(pose0, camera_pose(fine_end, ex));
  rep.pos_error_fine = (ego.p - fine_ego.p).norm();
  rep.rot_error_fine = log_so3(fine_ego.R.transpose() * ego.R).norm();

  rep.passed = rep.pos_error_truth <= rep.pos_bound && rep.rot_error_truth <= rep.rot_bound;
  return rep;
}

}  // namespace dynafuse
