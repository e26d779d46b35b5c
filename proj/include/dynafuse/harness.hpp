#pragma once

// End-to-end fusion episodes on synthetic trajectories: IMU stream, noisy
// visual ego-motion observations, the camera-centric filter, and the
// per-frame metrics (scale ratio, NEES, ego-motion error, losses).

#include "dynafuse/ekf.hpp"
#include "dynafuse/losses.hpp"
#include "dynafuse/scene.hpp"
#include "dynafuse/trajectory.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace dynafuse {

/// SplitMix64 mix of (base, stream, index); independent streams per purpose.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ stream) ^ index);
}

namespace stream {
inline constexpr std::uint64_t kImu = 1;
inline constexpr std::uint64_t kObservation = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kContrast = 4;
inline constexpr std::uint64_t kOccluder = 5;
inline constexpr std::uint64_t kEpisode = 6;
inline constexpr std::uint64_t kBias = 7;
}  // namespace stream

/// Camera mounted looking along the body's +y axis (left side), image x
/// along body +x and image y along body −z.
inline Extrinsics side_looking_extrinsics(const Vec3& p_bc = Vec3(0.05, 0.02, 0.03)) {
  Mat3 r_bc;
  r_bc.col(0) = Vec3::UnitX();
  r_bc.col(1) = -Vec3::UnitZ();
  r_bc.col(2) = Vec3::UnitY();
  return {r_bc.transpose(), p_bc};
}

/// Visual observation noise. The filter is told `reported_*`, which may
/// differ from the noise actually drawn.
struct ObservationSpec {
  double sigma_rot = 0.005;    ///< rad
  double sigma_trans = 0.02;   ///< m
  double reported_sigma_rot = -1.0;    ///< < 0: same as sigma_rot
  double reported_sigma_trans = -1.0;  ///< < 0: same as sigma_trans
  double scale = 1.0;  ///< multiplies the true translation

  void validate() const {
    if (!(sigma_rot >= 0 && sigma_trans >= 0)) {
      throw std::invalid_argument("observation sigmas must be non-negative");
    }
    if (!(reported_rot() > 0 && reported_trans() > 0)) {
      throw std::invalid_argument("reported observation sigmas must be positive");
    }
    if (!(scale > 0.0)) throw std::invalid_argument("observation scale must be positive");
  }

  double reported_rot() const { return reported_sigma_rot < 0 ? sigma_rot : reported_sigma_rot; }
  double reported_trans() const {
    return reported_sigma_trans < 0 ? sigma_trans : reported_sigma_trans;
  }
  static Mat6 diagonal(double rot, double trans) {
    Vec6 d;
    d << Vec3::Constant(rot * rot), Vec3::Constant(trans * trans);
    return d.asDiagonal();
  }
  Mat6 gamma_actual() const { return diagonal(sigma_rot, sigma_trans); }
  Mat6 gamma_reported() const { return diagonal(reported_rot(), reported_trans()); }
};

/// ξ = (log R, s·p) + n with n ~ N(0, Γ). Γ only needs to be PSD.
template <class Rng>
VisualObservation synthesize_observation(const CameraEgoMotion& truth, const Mat6& gamma, Rng& rng,
                                         double scale = 1.0) {
  const Mat6 sym = 0.5 * (gamma + gamma.transpose());
  Eigen::SelfAdjointEigenSolver<Mat6> es(sym);
  if (es.eigenvalues()(0) < -1e-12 * (1.0 + sym.norm())) {
    throw std::invalid_argument("synthesize_observation: gamma is not PSD");
  }
  const Mat6 root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec6 z;
  for (int i = 0; i < 6; ++i) z[i] = normal(rng);

  VisualObservation obs;
  obs.xi.head<3>() = log_so3(truth.R);
  obs.xi.tail<3>() = scale * truth.p;
  obs.xi += root * z;
  obs.gamma = gamma;
  return obs;
}

inline VisualObservation synthesize_observation(const CameraEgoMotion& truth, const Mat6& gamma,
                                                std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return synthesize_observation(truth, gamma, rng, scale);
}

inline CameraEgoMotion ego_from_xi(const Vec6& xi) {
  return {exp_so3(xi.head<3>()), xi.tail<3>(), std::nullopt};
}

/// Rotation the vision front end reports when occluders move between two
/// images: the occluded fraction times the rotation that would explain the
/// mean apparent occluder displacement.
inline Vec3 occluder_rotation_bias(const OccluderLayout& a, const OccluderLayout& b,
                                   const CameraIntrinsics& K) {
  Eigen::Vector2d d = Eigen::Vector2d::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) d += b[i].center() - a[i].center();
  d /= static_cast<double>(a.size());
  const double f = 0.5 * (occluded_fraction(a, K.width, K.height) +
                          occluded_fraction(b, K.width, K.height));
  return f * Vec3(d.y() / K.fy, -d.x() / K.fx, 0.0);
}

struct EpisodeConfig {
  TrajectorySpec trajectory;
  SceneSpec scene;
  ImuNoiseParams imu_noise = ImuNoiseParams::consumer_grade();
  /// Noise densities the filter assumes; defaults to imu_noise.
  std::optional<ImuNoiseParams> filter_imu_noise;
  ObservationSpec observation;
  Extrinsics extrinsics = side_looking_extrinsics();
  InitialCovariance initial_covariance;
  /// Draw the initial v, g errors and the true biases from P₀; otherwise
  /// the filter starts exact with zero biases.
  bool perturb_initial_state = true;
  Degradation degradation = Degradation::kNone;
  int loss_every = 0;  ///< 0 disables loss evaluation
  LossWeights loss_weights;
  std::uint64_t seed = 0;

  void validate() const {
    trajectory.validate();
    scene.validate();
    imu_noise.validate();
    if (filter_imu_noise) filter_imu_noise->validate();
    observation.validate();
    loss_weights.validate();
    if (loss_every < 0) throw std::invalid_argument("loss_every must be non-negative");
    if (trajectory.frame_count() < 1) {
      throw std::invalid_argument("episode needs at least one camera frame");
    }
  }
};

struct FrameMetrics {
  int k = 0;  ///< ego-motion c_{k−1} → c_k
  double t = 0.0;
  double scale_ratio = 0.0;
  double scale_ratio_vis = 0.0;
  double scale_ratio_imu = 0.0;
  double nees = 0.0;
  double err_fused_px = 0.0;
  double err_vis_px = 0.0;
  double err_imu_px = 0.0;
  double trace_P = 0.0;
};

struct LossSample {
  int k = 0;  ///< target camera index
  LossBreakdown clean;
  std::optional<LossBreakdown> degraded;
};

struct EpisodeMetrics {
  std::vector<FrameMetrics> frames;
  std::vector<LossSample> losses;
  double scale_ratio_median = 0.0;
  double scale_ratio_std = 0.0;
  double scale_ratio_vis_median = 0.0;
  double scale_ratio_imu_median = 0.0;
  double abs_rel = 0.0;
  double nees_mean = 0.0;
  double fused_better_fraction = 0.0;  ///< frames with err_fused < err_vis
  std::size_t covariance_checks = 0;
  double max_asymmetry = 0.0;
  double min_eigenvalue = 0.0;
};

struct EpisodeResult {
  EpisodeMetrics metrics;
  std::vector<ImuSample> imu;
  FilterRun run;
};

namespace stats {

inline std::vector<double> finite(std::span<const double> v) {
  std::vector<double> out;
  for (double x : v)
    if (std::isfinite(x)) out.push_back(x);
  return out;
}

inline double median(std::span<const double> v) {
  auto f = finite(v);
  if (f.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(f.begin(), f.end());
  const std::size_t n = f.size();
  return n % 2 ? f[n / 2] : 0.5 * (f[n / 2 - 1] + f[n / 2]);
}

inline double mean(std::span<const double> v) {
  auto f = finite(v);
  if (f.empty()) return std::numeric_limits<double>::quiet_NaN();
  return pairwise_sum(f) / static_cast<double>(f.size());
}

/// Population standard deviation.
inline double stddev(std::span<const double> v) {
  auto f = finite(v);
  if (f.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double m = pairwise_sum(f) / static_cast<double>(f.size());
  for (auto& x : f) x = (x - m) * (x - m);
  return std::sqrt(pairwise_sum(f) / static_cast<double>(f.size()));
}

}  // namespace stats

namespace detail {

inline double ratio_or_nan(const Vec3& num, const Vec3& den) {
  const double d = den.norm();
  return d > 1e-9 ? num.norm() / d : std::numeric_limits<double>::quiet_NaN();
}

/// Image-space magnitude of an ego-motion error, in pixels.
inline double ego_error_px(const CameraEgoMotion& est, const CameraEgoMotion& truth,
                           const CameraIntrinsics& K, double depth) {
  const double rot = log_so3(truth.R.transpose() * est.R).norm();
  const double trans = (est.p - truth.p).norm();
  return K.fx * (rot + trans / depth);
}

inline std::vector<double> column(const std::vector<FrameMetrics>& frames,
                                  double FrameMetrics::*field) {
  std::vector<double> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(f.*field);
  return out;
}

}  // namespace detail

/// Fill the aggregate fields of `m` from its per-frame rows.
inline void summarize(EpisodeMetrics& m) {
  const auto sr = detail::column(m.frames, &FrameMetrics::scale_ratio);
  m.scale_ratio_median = stats::median(sr);
  m.scale_ratio_std = stats::stddev(sr);
  m.scale_ratio_vis_median = stats::median(detail::column(m.frames, &FrameMetrics::scale_ratio_vis));
  m.scale_ratio_imu_median = stats::median(detail::column(m.frames, &FrameMetrics::scale_ratio_imu));
  std::vector<double> rel;
  for (double s : sr)
    if (std::isfinite(s)) rel.push_back(std::abs(s - 1.0));
  m.abs_rel = stats::mean(rel);
  m.nees_mean = stats::mean(detail::column(m.frames, &FrameMetrics::nees));
  std::size_t better = 0;
  for (const auto& f : m.frames)
    if (f.err_fused_px < f.err_vis_px) ++better;
  m.fused_better_fraction =
      m.frames.empty() ? 0.0 : static_cast<double>(better) / static_cast<double>(m.frames.size());
}

struct LossTriplet {
  std::array<ImageBuffer, 3> images;  ///< k−1, k, k+1
  DepthMap depth;                      ///< at k
};

/// L_vis, L_s, L_imu, L_cons on one triplet; L_vg is supplied by the caller.
inline LossBreakdown evaluate_losses(const LossTriplet& tri, const MotionPair& vis,
                                     const MotionPair& fused, const CameraIntrinsics& K,
                                     double l_vg, const LossWeights& w) {
  const SourcePair sources{&tri.images[0], &tri.images[2]};
  LossComponents c;
  c.l_vis = imu_photometric_loss(tri.images[1], sources, tri.depth, vis, K, w.ssim_alpha).value;
  c.l_imu = imu_photometric_loss(tri.images[1], sources, tri.depth, fused, K, w.ssim_alpha).value;
  c.l_cons = cross_sensor_loss(sources, tri.depth, vis, fused, K, w.ssim_alpha).value;
  c.l_s = smoothness_loss(tri.depth.disparity(), tri.images[1]);
  c.l_vg = l_vg;
  return total_loss(c, w);
}

inline EpisodeResult run_episode(const EpisodeConfig& cfg) {
  cfg.validate();
  const auto& spec = cfg.trajectory;
  const auto& ex = cfg.extrinsics;
  const auto& K = cfg.scene.intrinsics;
  const Vec3 g_w = default_gravity_world();
  const int m = spec.imu_per_frame();
  const int n_frames = spec.frame_count();
  const auto traj = generate_trajectory(spec);
  const double dt = 1.0 / spec.imu_rate;

  // True biases: initial draw from P₀, then a per-sample random walk.
  std::mt19937_64 bias_rng(derive_seed(cfg.seed, stream::kBias, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw3 = [&](std::mt19937_64& rng, double sigma) {
    return Vec3(sigma * normal(rng), sigma * normal(rng), sigma * normal(rng));
  };
  ImuBias bias;
  if (cfg.perturb_initial_state) {
    bias.b_w = draw3(bias_rng, std::sqrt(cfg.initial_covariance.gyro_bias));
    bias.b_a = draw3(bias_rng, std::sqrt(cfg.initial_covariance.accel_bias));
  }
  std::vector<ImuBias> biases;
  biases.reserve(traj.size());

  EpisodeResult res;
  res.imu.reserve(traj.size());
  std::mt19937_64 imu_rng(derive_seed(cfg.seed, stream::kImu, 0));
  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (i > 0) {
      bias.b_w += draw3(bias_rng, cfg.imu_noise.sigma_bw * std::sqrt(dt));
      bias.b_a += draw3(bias_rng, cfg.imu_noise.sigma_ba * std::sqrt(dt));
    }
    biases.push_back(bias);
    const auto& pt = traj[i];
    res.imu.push_back(simulate_measurement(pt.world_state(g_w), pt.a, pt.w_b, bias,
                                           cfg.imu_noise, spec.imu_rate, imu_rng));
  }

  std::vector<CameraPose> poses;
  for (int k = 0; k <= n_frames; ++k) poses.push_back(camera_pose(traj[k * m], ex));
  std::vector<CameraEgoMotion> truth_ego;
  for (int k = 0; k < n_frames; ++k) truth_ego.push_back(relative_motion(poses[k], poses[k + 1]));

  std::vector<OccluderLayout> occluders;
  if (cfg.degradation == Degradation::kOccluders) {
    for (int k = 0; k <= n_frames; ++k)
      occluders.push_back(draw_occluders(K, derive_seed(cfg.seed, stream::kOccluder, k)));
  }

  std::mt19937_64 obs_rng(derive_seed(cfg.seed, stream::kObservation, 0));
  std::vector<CameraEpoch> epochs;
  std::vector<VisualObservation> observations;
  for (int k = 0; k < n_frames; ++k) {
    auto obs = synthesize_observation(truth_ego[k], cfg.observation.gamma_actual(), obs_rng,
                                      cfg.observation.scale);
    if (!occluders.empty()) {
      obs.xi.head<3>() += occluder_rotation_bias(occluders[k], occluders[k + 1], K);
    }
    obs.gamma = cfg.observation.gamma_reported();
    observations.push_back(obs);
    epochs.push_back({traj[(k + 1) * m].t, obs});
  }

  // Initial state at c₀ with v, g perturbed according to P₀.
  const Mat3 r_c0w = poses[0].R_wc.transpose();
  Vec3 v0 = r_c0w * traj[0].v;
  Vec3 g0 = r_c0w * g_w;
  if (cfg.perturb_initial_state) {
    std::mt19937_64 init_rng(derive_seed(cfg.seed, stream::kInit, 0));
    v0 += draw3(init_rng, std::sqrt(cfg.initial_covariance.vel));
    g0 += draw3(init_rng, std::sqrt(cfg.initial_covariance.grav));
  }
  const auto init = NominalState::anchored(ex, v0, g0, ImuBias{}, traj[0].t);
  res.run = run_filter(res.imu, epochs, ex, init,
                       ErrorStateCovariance::initial(cfg.initial_covariance),
                       cfg.filter_imu_noise.value_or(cfg.imu_noise));

  auto& met = res.metrics;
  met.covariance_checks = res.run.covariance_checks;
  met.max_asymmetry = res.run.max_asymmetry;
  met.min_eigenvalue = res.run.min_eigenvalue;
  for (int k = 0; k < n_frames; ++k) {
    const auto& fr = res.run.frames[k];
    const auto& pt = traj[(k + 1) * m];
    const Mat3 r_ckw = poses[k].R_wc.transpose();
    NominalState truth;
    truth.R_ckbt = r_ckw * pt.R_wb;
    truth.p_ckbt = r_ckw * (pt.p - poses[k].p_wc);
    truth.v_ck = r_ckw * pt.v;
    truth.g_ck = r_ckw * g_w;
    truth.b_w = biases[(k + 1) * m].b_w;
    truth.b_a = biases[(k + 1) * m].b_a;

    FrameMetrics fm;
    fm.k = k + 1;
    fm.t = fr.t;
    const Vec6 e = fr.posterior.boxminus(truth).head<6>();
    fm.nees = e.dot(fr.pose_cov.ldlt().solve(e));
    const auto vis = ego_from_xi(observations[k].xi);
    const auto& te = truth_ego[k];
    fm.scale_ratio = detail::ratio_or_nan(fr.fused.ego.p, te.p);
    fm.scale_ratio_vis = detail::ratio_or_nan(vis.p, te.p);
    fm.scale_ratio_imu = detail::ratio_or_nan(fr.prior.p, te.p);
    double depth = scene_depth_at(cfg.scene, poses[k], K.cx, K.cy);
    if (!(depth > kMinSceneDepth)) depth = cfg.scene.plane_distance;
    fm.err_fused_px = detail::ego_error_px(fr.fused.ego, te, K, depth);
    fm.err_vis_px = detail::ego_error_px(vis, te, K, depth);
    fm.err_imu_px = detail::ego_error_px(fr.prior, te, K, depth);
    fm.trace_P = fr.trace_P;
    met.frames.push_back(fm);
  }

  if (cfg.loss_every > 0) {
    for (int k = cfg.loss_every; k < n_frames; k += cfg.loss_every) {
      LossTriplet clean;
      for (int j = 0; j < 3; ++j) {
        auto view = render_scene(cfg.scene, poses[k - 1 + j]);
        clean.images[j] = std::move(view.image);
        if (j == 1) clean.depth = std::move(view.depth);
      }
      const MotionPair vis{ego_from_xi(observations[k - 1].xi),
                           ego_from_xi(observations[k].xi).inverse()};
      const MotionPair fused{res.run.frames[k - 1].fused.ego,
                             res.run.frames[k].fused.ego.inverse()};
      const auto& post = res.run.frames[k].posterior;
      const auto& pt = traj[(k + 1) * m];
      const Mat3 r_ckw = poses[k].R_wc.transpose();
      const double l_vg = vg_loss(post.v_ck, post.g_ck, r_ckw * pt.v, r_ckw * g_w);

      LossSample ls;
      ls.k = k;
      ls.clean = evaluate_losses(clean, vis, fused, K, l_vg, cfg.loss_weights);
      if (cfg.degradation != Degradation::kNone) {
        LossTriplet deg = clean;
        for (int j = 0; j < 3; ++j) {
          const int idx = k - 1 + j;
          if (cfg.degradation == Degradation::kContrast) {
            const double c = draw_contrast(derive_seed(cfg.seed, stream::kContrast, idx));
            deg.images[j] = apply_contrast(clean.images[j], c);
          } else {
            deg.images[j] = apply_occluders(clean.images[j], occluders[idx]);
          }
        }
        ls.degraded = evaluate_losses(deg, vis, fused, K, l_vg, cfg.loss_weights);
      }
      met.losses.push_back(ls);
    }
  }

  summarize(met);
  return res;
}

/// Worker count: DYNAFUSE_THREADS if set to a positive integer, otherwise
/// the hardware concurrency.
inline unsigned episode_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DYNAFUSE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = static_cast<unsigned>(v);
  }
  return n;
}

/// Seed of the i-th Monte-Carlo episode derived from a base config.
inline EpisodeConfig episode_config(const EpisodeConfig& base, std::size_t i) {
  EpisodeConfig c = base;
  c.seed = derive_seed(base.seed, stream::kEpisode, i);
  return c;
}

/// Independent episodes in parallel; results are ordered by episode index
/// and do not depend on the thread count.
inline std::vector<EpisodeResult> run_episodes(const EpisodeConfig& base, std::size_t count,
                                               unsigned threads = episode_threads()) {
  std::vector<EpisodeResult> out(count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        out[i] = run_episode(episode_config(base, i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// Pool the frames of several episodes into one summary.
inline EpisodeMetrics pool_metrics(std::span<const EpisodeResult> episodes) {
  EpisodeMetrics m;
  m.min_eigenvalue = std::numeric_limits<double>::infinity();
  for (const auto& e : episodes) {
    m.frames.insert(m.frames.end(), e.metrics.frames.begin(), e.metrics.frames.end());
    m.losses.insert(m.losses.end(), e.metrics.losses.begin(), e.metrics.losses.end());
    m.covariance_checks += e.metrics.covariance_checks;
    m.max_asymmetry = std::max(m.max_asymmetry, e.metrics.max_asymmetry);
    m.min_eigenvalue = std::min(m.min_eigenvalue, e.metrics.min_eigenvalue);
  }
  summarize(m);
  return m;
}

}  // namespace dynafuse
