#pragma once

// Camera-centric error-state EKF.
//
// The state lives in the camera frame c_k of the most recent image:
//   x = [φ_{c_k b_t}, p_{c_k b_t}, v^{c_k}, g^{c_k}, b_w, b_a]
// with R = R̄·exp([δφ]^) and additive errors elsewhere. At every camera
// epoch the filter is updated with a visual ego-motion observation
// ξ = [φ̃_{c_k c_{k+1}}, p̃_{c_k c_{k+1}}] and then re-anchored to c_{k+1}.

#include "dynafuse/imu.hpp"
#include "dynafuse/so3.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynafuse {

using Vec18 = Eigen::Matrix<double, 18, 1>;
using Mat18 = Eigen::Matrix<double, 18, 18>;
using Mat12 = Eigen::Matrix<double, 12, 12>;
using Mat18x12 = Eigen::Matrix<double, 18, 12>;
using Mat6x18 = Eigen::Matrix<double, 6, 18>;
using Mat18x6 = Eigen::Matrix<double, 18, 6>;

/// Offsets of the 3-blocks inside δx.
namespace block {
inline constexpr int kRot = 0;
inline constexpr int kPos = 3;
inline constexpr int kVel = 6;
inline constexpr int kGrav = 9;
inline constexpr int kGyroBias = 12;
inline constexpr int kAccelBias = 15;
}  // namespace block

/// Offsets of the noise 3-blocks, ordered to match Q = diag(σ_w², σ_bw², σ_a², σ_ba²).
namespace noise_block {
inline constexpr int kGyro = 0;
inline constexpr int kGyroBias = 3;
inline constexpr int kAccel = 6;
inline constexpr int kAccelBias = 9;
}  // namespace noise_block

struct NominalState {
  Mat3 R_ckbt = Mat3::Identity();
  Vec3 p_ckbt = Vec3::Zero();
  Vec3 v_ck = Vec3::Zero();
  Vec3 g_ck = Vec3::Zero();
  Vec3 b_w = Vec3::Zero();
  Vec3 b_a = Vec3::Zero();
  double t = 0.0;

  ImuBias bias() const { return {b_w, b_a}; }

  /// State at a camera epoch: the body sits at the extrinsic offset.
  static NominalState anchored(const Extrinsics& ex, const Vec3& v_ck, const Vec3& g_ck,
                               const ImuBias& bias, double t) {
    return {ex.R_cb(), ex.p_cb(), v_ck, g_ck, bias.b_w, bias.b_a, t};
  }

  /// x ⊞ δx following R·exp(δφ), additive elsewhere.
  NominalState boxplus(const Vec18& dx) const {
    NominalState out = *this;
    out.R_ckbt = R_ckbt * exp_so3(dx.segment<3>(block::kRot));
    out.p_ckbt += dx.segment<3>(block::kPos);
    out.v_ck += dx.segment<3>(block::kVel);
    out.g_ck += dx.segment<3>(block::kGrav);
    out.b_w += dx.segment<3>(block::kGyroBias);
    out.b_a += dx.segment<3>(block::kAccelBias);
    return out;
  }

  /// δx such that this ⊞ δx = other.
  Vec18 boxminus(const NominalState& other) const {
    Vec18 dx;
    dx.segment<3>(block::kRot) = log_so3(R_ckbt.transpose() * other.R_ckbt);
    dx.segment<3>(block::kPos) = other.p_ckbt - p_ckbt;
    dx.segment<3>(block::kVel) = other.v_ck - v_ck;
    dx.segment<3>(block::kGrav) = other.g_ck - g_ck;
    dx.segment<3>(block::kGyroBias) = other.b_w - b_w;
    dx.segment<3>(block::kAccelBias) = other.b_a - b_a;
    return dx;
  }
};

/// Diagonal variances of the initial error-state covariance.
struct InitialCovariance {
  double rot = 1e-4;         ///< rad²
  double pos = 1e-4;         ///< m²
  double vel = 1e-2;         ///< (m/s)²
  double grav = 1e-2;        ///< (m/s²)²
  double gyro_bias = 1e-6;   ///< (rad/s)²
  double accel_bias = 1e-4;  ///< (m/s²)²

  Mat18 matrix() const {
    Vec18 d;
    d << Vec3::Constant(rot), Vec3::Constant(pos), Vec3::Constant(vel), Vec3::Constant(grav),
        Vec3::Constant(gyro_bias), Vec3::Constant(accel_bias);
    return d.asDiagonal();
  }
};

inline constexpr double kCovarianceTol = 1e-9;

/// Symmetric PSD 18×18 covariance of δx.
class ErrorStateCovariance {
 public:
  ErrorStateCovariance() = default;
  explicit ErrorStateCovariance(const Mat18& p) : p_(p) {}
  static ErrorStateCovariance initial(const InitialCovariance& cfg = {}) {
    return ErrorStateCovariance(cfg.matrix());
  }

  const Mat18& matrix() const { return p_; }
  Mat18& matrix() { return p_; }

  double asymmetry() const { return (p_ - p_.transpose()).cwiseAbs().maxCoeff(); }
  double min_eigenvalue() const {
    const Mat18 sym = 0.5 * (p_ + p_.transpose());
    return Eigen::SelfAdjointEigenSolver<Mat18>(sym, Eigen::EigenvaluesOnly).eigenvalues()(0);
  }

  void symmetrize() { p_ = 0.5 * (p_ + p_.transpose()).eval(); }

  /// Throws NumericError unless symmetric and PSD within kCovarianceTol.
  void validate(const char* where) const {
    if (!p_.allFinite()) {
      throw NumericError(std::string(where) + ": covariance has non-finite entries");
    }
    const double asym = asymmetry();
    if (asym > kCovarianceTol) {
      throw NumericError(std::string(where) + ": covariance asymmetric by " +
                         std::to_string(asym));
    }
    const double min_eig = min_eigenvalue();
    if (min_eig < -kCovarianceTol) {
      std::ostringstream msg;
      msg << where << ": covariance not PSD (min eigenvalue " << min_eig << ")";
      throw NumericError(msg.str());
    }
  }

 private:
  Mat18 p_ = Mat18::Zero();
};

struct VisualObservation {
  Vec6 xi = Vec6::Zero();       ///< (φ̃, p̃)
  Mat6 gamma = Mat6::Identity();

  void validate() const {
    if (!xi.allFinite() || !gamma.allFinite()) {
      throw std::invalid_argument("visual observation has non-finite entries");
    }
    if ((gamma - gamma.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + gamma.norm())) {
      throw std::invalid_argument("observation covariance is not symmetric");
    }
    const Mat6 sym = 0.5 * (gamma + gamma.transpose());
    const double min_eig =
        Eigen::SelfAdjointEigenSolver<Mat6>(sym, Eigen::EigenvaluesOnly).eigenvalues()(0);
    if (!(min_eig > 0.0)) {
      throw std::invalid_argument("observation covariance is not positive definite");
    }
  }
};

struct FusedEgoMotion {
  CameraEgoMotion ego;
  Mat6 posterior_cov6 = Mat6::Zero();
  double trace_reduction = 0.0;
};

// ---------------------------------------------------------------------------
// Propagation

/// Continuous error dynamics δẋ = F δx + G n, linearized at `nom` with the
/// measured rates in `sample`.
inline Mat18 build_F(const NominalState& nom, const ImuSample& sample) {
  using namespace block;
  const Mat3& r = nom.R_ckbt;
  const Vec3 w_bar = sample.w_m - nom.b_w;
  const Vec3 a_bar = sample.a_m - r.transpose() * nom.g_ck - nom.b_a;
  Mat18 f = Mat18::Zero();
  f.block<3, 3>(kRot, kRot) = -hat(w_bar);
  f.block<3, 3>(kRot, kGyroBias) = -Mat3::Identity();
  f.block<3, 3>(kPos, kVel) = Mat3::Identity();
  f.block<3, 3>(kVel, kRot) = -r * hat(r.transpose() * nom.g_ck + a_bar);
  f.block<3, 3>(kVel, kGrav) = -Mat3::Identity();
  f.block<3, 3>(kVel, kAccelBias) = -r;
  return f;
}

inline Mat18x12 build_G(const NominalState& nom) {
  Mat18x12 g = Mat18x12::Zero();
  g.block<3, 3>(block::kRot, noise_block::kGyro) = -Mat3::Identity();
  g.block<3, 3>(block::kVel, noise_block::kAccel) = -nom.R_ckbt;
  g.block<3, 3>(block::kGyroBias, noise_block::kGyroBias) = Mat3::Identity();
  g.block<3, 3>(block::kAccelBias, noise_block::kAccelBias) = Mat3::Identity();
  return g;
}

/// Φ ≈ I + F·dt + ½F²·dt².
inline Mat18 transition_matrix(const Mat18& f, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("transition_matrix: dt must be positive");
  const Mat18 fdt = f * dt;
  return Mat18::Identity() + fdt + 0.5 * fdt * fdt;
}

inline Mat12 continuous_noise(const ImuNoiseParams& n) {
  Eigen::Matrix<double, 12, 1> d;
  d << Vec3::Constant(n.sigma_w * n.sigma_w), Vec3::Constant(n.sigma_bw * n.sigma_bw),
      Vec3::Constant(n.sigma_a * n.sigma_a), Vec3::Constant(n.sigma_ba * n.sigma_ba);
  return d.asDiagonal();
}

struct Propagated {
  NominalState nom;
  ErrorStateCovariance P;
};

/// One IMU interval [from.t, to.t]: midpoint nominal update and
///   P ← Φ P Φᵀ + Φ G Q Gᵀ Φᵀ dt.
/// F is linearized at the interval start with the averaged measurement.
inline Propagated propagate(const ErrorStateCovariance& P, const NominalState& nom,
                            const ImuSample& from, const ImuSample& to,
                            const ImuNoiseParams& noise) {
  const double dt = to.t - from.t;
  if (!(dt > 0.0)) throw std::invalid_argument("propagate: dt must be positive");
  P.validate("propagate input");

  ImuSample mid;
  mid.t = from.t;
  mid.w_m = 0.5 * (from.w_m + to.w_m);
  mid.a_m = 0.5 * (from.a_m + to.a_m);
  const Mat18 phi = transition_matrix(build_F(nom, mid), dt);
  const Mat18x12 g = build_G(nom);
  const Mat18 gqg = g * continuous_noise(noise) * g.transpose();

  Propagated out;
  out.P = ErrorStateCovariance(phi * P.matrix() * phi.transpose() +
                               phi * gqg * phi.transpose() * dt);
  out.P.symmetrize();

  out.nom = nom;
  midpoint_step(out.nom.R_ckbt, out.nom.p_ckbt, out.nom.v_ck, nom.g_ck, from, to, nom.bias());
  out.nom.t = to.t;
  return out;
}

// ---------------------------------------------------------------------------
// Update

/// h(x) = [log(R̄ R_bc); R̄ p_bc + p̄], the camera ego-motion c_k → c_{k+1}.
inline Vec6 observation_h(const NominalState& nom, const Extrinsics& ex) {
  Vec6 h;
  h.head<3>() = log_so3(nom.R_ckbt * ex.R_bc());
  h.tail<3>() = nom.R_ckbt * ex.p_bc() + nom.p_ckbt;
  return h;
}

inline Mat6x18 observation_H(const NominalState& nom, const Extrinsics& ex) {
  const Vec3 phi = log_so3(nom.R_ckbt * ex.R_bc());
  Mat6x18 h = Mat6x18::Zero();
  h.block<3, 3>(0, block::kRot) = left_jacobian_inv(-phi) * ex.R_cb();
  h.block<3, 3>(3, block::kRot) = -nom.R_ckbt * hat(ex.p_bc());
  h.block<3, 3>(3, block::kPos) = Mat3::Identity();
  return h;
}

/// ξ ⊟ h(x): the rotation part is the right tangent log(exp(φ̄)ᵀ exp(φ̃))
/// mapped into φ coordinates through J_l(−φ̄)^{-1}, matching H.
inline Vec6 innovation(const Vec6& xi, const Vec6& h) {
  const Vec3 phi_bar = h.head<3>();
  Vec6 r;
  r.head<3>() = left_jacobian_inv(-phi_bar) *
                log_so3(exp_so3(phi_bar).transpose() * exp_so3(xi.head<3>()));
  r.tail<3>() = xi.tail<3>() - h.tail<3>();
  return r;
}

inline CameraEgoMotion ego_from_nominal(const NominalState& nom, const Extrinsics& ex) {
  return {nom.R_ckbt * ex.R_bc(), nom.R_ckbt * ex.p_bc() + nom.p_ckbt, std::nullopt};
}

/// Marginal covariance of the ego-motion in ξ coordinates.
inline Mat6 ego_covariance(const NominalState& nom, const ErrorStateCovariance& P,
                           const Extrinsics& ex) {
  const Mat6x18 h = observation_H(nom, ex);
  Mat6 c = h * P.matrix() * h.transpose();
  return 0.5 * (c + c.transpose());
}

struct UpdateResult {
  FusedEgoMotion fused;
  NominalState nom;
  ErrorStateCovariance P;
  Mat18x6 K = Mat18x6::Zero();
  Vec6 residual = Vec6::Zero();
  Vec18 dx = Vec18::Zero();
};

inline constexpr double kMaxInnovationCondition = 1e14;

inline UpdateResult update(const ErrorStateCovariance& P, const NominalState& nom,
                           const VisualObservation& obs, const Extrinsics& ex) {
  obs.validate();
  P.validate("update input");
  const Mat18& p = P.matrix();
  const Mat6x18 h_mat = observation_H(nom, ex);
  const Vec6 h = observation_h(nom, ex);

  Mat6 s = h_mat * p * h_mat.transpose() + obs.gamma;
  s = 0.5 * (s + s.transpose()).eval();
  const auto eig = Eigen::SelfAdjointEigenSolver<Mat6>(s, Eigen::EigenvaluesOnly).eigenvalues();
  const double cond = eig(5) / eig(0);
  if (!(eig(0) > 0.0) || !(cond < kMaxInnovationCondition)) {
    std::ostringstream msg;
    msg << "update: singular innovation covariance (condition number " << cond << ")";
    throw NumericError(msg.str());
  }

  UpdateResult out;
  // K = P Hᵀ S⁻¹, solved as (S⁻¹ H P)ᵀ with S symmetric.
  out.K = s.ldlt().solve(h_mat * p).transpose();
  out.residual = innovation(obs.xi, h);
  out.dx = out.K * out.residual;

  const Mat18 ikh = Mat18::Identity() - out.K * h_mat;
  out.P = ErrorStateCovariance(ikh * p * ikh.transpose() +
                               out.K * obs.gamma * out.K.transpose());
  out.P.symmetrize();

  out.nom = nom.boxplus(out.dx);
  out.fused.ego = ego_from_nominal(out.nom, ex);
  out.fused.posterior_cov6 = ego_covariance(out.nom, out.P, ex);
  out.fused.ego.cov = out.fused.posterior_cov6;
  out.fused.trace_reduction = p.trace() - out.P.matrix().trace();
  return out;
}

/// Move the anchor from c_k to the camera frame at the current epoch. The
/// relative pose becomes the extrinsic offset exactly; velocity and gravity
/// are rotated into the new frame and pick up the rotation uncertainty.
inline Propagated reanchor(const NominalState& nom, const ErrorStateCovariance& P,
                           const Extrinsics& ex) {
  using namespace block;
  const Mat3 r_new_old = ex.R_cb() * nom.R_ckbt.transpose();

  Mat18 j = Mat18::Zero();
  j.block<3, 3>(kVel, kRot) = ex.R_cb() * hat(nom.R_ckbt.transpose() * nom.v_ck);
  j.block<3, 3>(kVel, kVel) = r_new_old;
  j.block<3, 3>(kGrav, kRot) = ex.R_cb() * hat(nom.R_ckbt.transpose() * nom.g_ck);
  j.block<3, 3>(kGrav, kGrav) = r_new_old;
  j.block<3, 3>(kGyroBias, kGyroBias) = Mat3::Identity();
  j.block<3, 3>(kAccelBias, kAccelBias) = Mat3::Identity();

  Propagated out;
  out.nom = NominalState::anchored(ex, r_new_old * nom.v_ck, r_new_old * nom.g_ck, nom.bias(),
                                   nom.t);
  out.P = ErrorStateCovariance(j * P.matrix() * j.transpose());
  out.P.symmetrize();
  return out;
}

// ---------------------------------------------------------------------------
// Streaming filter

struct CameraEpoch {
  double t = 0.0;
  std::optional<VisualObservation> obs;
};

struct FilterFrame {
  double t = 0.0;
  CameraEgoMotion prior;  ///< IMU-only ego-motion before the update
  FusedEgoMotion fused;
  NominalState posterior;  ///< before re-anchoring, in c_{k-1}
  Mat6 pose_cov = Mat6::Zero();  ///< (δφ, δp) block of the posterior P
  double trace_P = 0.0;
  bool updated = false;
};

struct FilterRun {
  std::vector<FilterFrame> frames;
  std::size_t covariance_checks = 0;
  double max_asymmetry = 0.0;
  double min_eigenvalue = std::numeric_limits<double>::infinity();
};

namespace detail {

inline void check_and_record(const ErrorStateCovariance& P, FilterRun& run, const char* where) {
  P.validate(where);
  ++run.covariance_checks;
  run.max_asymmetry = std::max(run.max_asymmetry, P.asymmetry());
  run.min_eigenvalue = std::min(run.min_eigenvalue, P.min_eigenvalue());
}

inline std::size_t find_epoch(std::span<const ImuSample> imu, double t, std::size_t from) {
  constexpr double kTimeTol = 1e-9;
  for (std::size_t i = from; i < imu.size(); ++i) {
    if (std::abs(imu[i].t - t) <= kTimeTol) return i;
    if (imu[i].t > t + kTimeTol) break;
  }
  std::ostringstream msg;
  msg << std::setprecision(12) << "camera epoch t=" << t
      << " does not coincide with an IMU timestamp after t=" << imu[from].t;
  throw std::invalid_argument(msg.str());
}

}  // namespace detail

/// Propagate through the IMU stream, update at each camera epoch that
/// carries an observation, emit the fused ego-motion, then re-anchor.
/// `init` must sit at an IMU timestamp; every epoch must fall on a later one.
inline FilterRun run_filter(std::span<const ImuSample> imu, std::span<const CameraEpoch> epochs,
                            const Extrinsics& ex, const NominalState& init,
                            const ErrorStateCovariance& P0, const ImuNoiseParams& noise) {
  if (imu.empty()) throw std::invalid_argument("run_filter: empty IMU stream");
  if (epochs.empty()) throw std::invalid_argument("run_filter: empty camera stream");
  validate_sequence(imu, 2);

  FilterRun run;
  run.frames.reserve(epochs.size());
  NominalState nom = init;
  ErrorStateCovariance P = P0;
  detail::check_and_record(P, run, "initial covariance");
  std::size_t i = detail::find_epoch(imu, init.t, 0);

  for (const auto& epoch : epochs) {
    if (!(epoch.t > nom.t)) {
      throw std::invalid_argument("run_filter: camera epochs must be strictly increasing");
    }
    const std::size_t j = detail::find_epoch(imu, epoch.t, i);
    for (; i < j; ++i) {
      auto step = propagate(P, nom, imu[i], imu[i + 1], noise);
      nom = step.nom;
      P = step.P;
      detail::check_and_record(P, run, "propagate");
    }

    FilterFrame frame;
    frame.t = epoch.t;
    frame.prior = ego_from_nominal(nom, ex);
    if (epoch.obs) {
      auto up = update(P, nom, *epoch.obs, ex);
      nom = up.nom;
      P = up.P;
      detail::check_and_record(P, run, "update");
      frame.fused = up.fused;
      frame.updated = true;
    } else {
      frame.fused.ego = ego_from_nominal(nom, ex);
      frame.fused.posterior_cov6 = ego_covariance(nom, P, ex);
      frame.fused.ego.cov = frame.fused.posterior_cov6;
    }
    frame.posterior = nom;
    frame.pose_cov = P.matrix().topLeftCorner<6, 6>();
    frame.trace_P = P.matrix().trace();
    run.frames.push_back(frame);

    auto anchored = reanchor(nom, P, ex);
    nom = anchored.nom;
    P = anchored.P;
    detail::check_and_record(P, run, "reanchor");
  }
  return run;
}

/// Per-epoch trace rows `k,phi_x,phi_y,phi_z,p_x,p_y,p_z,trace_P,nees`.
/// `nees` may be shorter than `frames`; missing entries are written as nan.
inline void write_filter_trace_csv(std::ostream& os, std::span<const FilterFrame> frames,
                                   std::span<const double> nees = {}) {
  os << "k,phi_x,phi_y,phi_z,p_x,p_y,p_z,trace_P,nees\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& f = frames[k];
    const Vec3 phi = log_so3(f.fused.ego.R);
    const double n = k < nees.size() ? nees[k] : std::numeric_limits<double>::quiet_NaN();
    os << k + 1 << ',' << phi.x() << ',' << phi.y() << ',' << phi.z() << ',' << f.fused.ego.p.x()
       << ',' << f.fused.ego.p.y() << ',' << f.fused.ego.p.z() << ',' << f.trace_P << ',' << n
       << '\n';
  }
}

}  // namespace dynafuse
