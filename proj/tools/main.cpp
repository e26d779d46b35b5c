// dynafuse command-line front end.
//
// Exit codes:
//   0  success
//   1  check failed (gradcheck / preint-check outside tolerance)
//   2  usage or config error
//   3  numeric failure (non-PSD covariance, singular innovation, ...)

#include "config.hpp"
#include "image_io.hpp"

#include "dynafuse/checks.hpp"
#include "dynafuse/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dynafuse;
using dynafuse::cli::RunConfig;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> tol;
  double rate = 100.0;
  double duration = 2.0;
  int cases = 100;
  std::string mutate;
};

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json mat_json(const Mat3& m) {
  json rows = json::array();
  for (int i = 0; i < 3; ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

json breakdown_json(const LossBreakdown& b) {
  return {{"l_vis", b.l_vis}, {"l_s", b.l_s},       {"l_imu", b.l_imu},
          {"l_cons", b.l_cons}, {"l_vg", b.l_vg}, {"total", b.total}};
}

/// Component-wise mean (or max |a − b|) over the loss samples.
LossBreakdown reduce_losses(const std::vector<LossSample>& ls, bool degraded, bool delta) {
  std::vector<double> cols[6];
  for (const auto& s : ls) {
    if ((degraded || delta) && !s.degraded) continue;
    const LossBreakdown& a = degraded ? *s.degraded : s.clean;
    const double va[6] = {a.l_vis, a.l_s, a.l_imu, a.l_cons, a.l_vg, a.total};
    if (delta) {
      const LossBreakdown& b = *s.degraded;
      const double vb[6] = {b.l_vis, b.l_s, b.l_imu, b.l_cons, b.l_vg, b.total};
      const LossBreakdown& c = s.clean;
      const double vc[6] = {c.l_vis, c.l_s, c.l_imu, c.l_cons, c.l_vg, c.total};
      for (int i = 0; i < 6; ++i) cols[i].push_back(std::abs(vb[i] - vc[i]));
    } else {
      for (int i = 0; i < 6; ++i) cols[i].push_back(va[i]);
    }
  }
  auto red = [&](const std::vector<double>& v) {
    if (delta) {
      double m = 0.0;
      for (double x : v) m = std::max(m, x);
      return m;
    }
    return stats::mean(v);
  };
  LossBreakdown out;
  out.l_vis = red(cols[0]);
  out.l_s = red(cols[1]);
  out.l_imu = red(cols[2]);
  out.l_cons = red(cols[3]);
  out.l_vg = red(cols[4]);
  out.total = red(cols[5]);
  return out;
}

json summary_json(const RunConfig& rc, const std::vector<EpisodeResult>& eps,
                  const EpisodeMetrics& pooled) {
  json j;
  j["seed"] = rc.episode.seed;
  j["episodes"] = eps.size();
  j["frames"] = pooled.frames.size();
  j["degradation"] = to_string(rc.episode.degradation);
  j["scale_ratio_median"] = pooled.scale_ratio_median;
  j["scale_ratio_std"] = pooled.scale_ratio_std;
  j["scale_ratio_vis_median"] = pooled.scale_ratio_vis_median;
  j["scale_ratio_imu_median"] = pooled.scale_ratio_imu_median;
  j["abs_rel"] = pooled.abs_rel;
  j["nees_mean"] = pooled.nees_mean;
  j["fused_better_fraction"] = pooled.fused_better_fraction;
  j["covariance"] = {{"checks", pooled.covariance_checks},
                     {"max_asymmetry", pooled.max_asymmetry},
                     {"min_eigenvalue", pooled.min_eigenvalue}};
  json losses;
  losses["frames"] = pooled.losses.size();
  if (!pooled.losses.empty()) {
    losses["clean"] = breakdown_json(reduce_losses(pooled.losses, false, false));
    if (rc.episode.degradation != Degradation::kNone) {
      losses["degraded"] = breakdown_json(reduce_losses(pooled.losses, true, false));
      losses["max_abs_change"] = breakdown_json(reduce_losses(pooled.losses, false, true));
    }
  }
  j["losses"] = losses;
  json per = json::array();
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const auto& m = eps[i].metrics;
    per.push_back({{"episode", i},
                   {"scale_ratio_median", m.scale_ratio_median},
                   {"scale_ratio_std", m.scale_ratio_std},
                   {"nees_mean", m.nees_mean},
                   {"fused_better_fraction", m.fused_better_fraction}});
  }
  j["per_episode"] = per;
  return j;
}

void write_metrics_csv(std::ostream& os, const std::vector<EpisodeResult>& eps) {
  os << "episode,k,t,scale_ratio,scale_ratio_vis,scale_ratio_imu,nees,err_fused_px,err_vis_px,"
        "err_imu_px,trace_P\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t e = 0; e < eps.size(); ++e) {
    for (const auto& f : eps[e].metrics.frames) {
      os << e << ',' << f.k << ',' << f.t << ',' << f.scale_ratio << ',' << f.scale_ratio_vis
         << ',' << f.scale_ratio_imu << ',' << f.nees << ',' << f.err_fused_px << ','
         << f.err_vis_px << ',' << f.err_imu_px << ',' << f.trace_P << '\n';
    }
  }
}

void write_losses_csv(std::ostream& os, const std::vector<EpisodeResult>& eps) {
  os << "episode,k,variant,l_vis,l_s,l_imu,l_cons,l_vg,total\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  auto row = [&](std::size_t e, int k, const char* v, const LossBreakdown& b) {
    os << e << ',' << k << ',' << v << ',' << b.l_vis << ',' << b.l_s << ',' << b.l_imu << ','
       << b.l_cons << ',' << b.l_vg << ',' << b.total << '\n';
  };
  for (std::size_t e = 0; e < eps.size(); ++e) {
    for (const auto& s : eps[e].metrics.losses) {
      row(e, s.k, "clean", s.clean);
      if (s.degraded) row(e, s.k, "degraded", *s.degraded);
    }
  }
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << content;
}

fs::path prepare_out(const std::string& out) {
  fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw cli::ConfigError("output directory '" + dir.string() + "' is not writable");
  return dir;
}

int cmd_simulate(const Options& o) {
  if (o.config.empty()) throw cli::ConfigError("simulate requires --config PATH");
  auto rc = cli::load_config(o.config);
  if (o.seed) rc.episode.seed = *o.seed;
  const fs::path dir = prepare_out(o.out);

  const auto eps = run_episodes(rc.episode, static_cast<std::size_t>(rc.episodes));
  const auto pooled = pool_metrics(eps);

  std::ostringstream metrics, losses, trace, imu;
  write_metrics_csv(metrics, eps);
  write_losses_csv(losses, eps);
  std::vector<double> nees;
  for (const auto& f : eps.front().metrics.frames) nees.push_back(f.nees);
  write_filter_trace_csv(trace, eps.front().run.frames, nees);
  write_imu_csv(imu, eps.front().imu);
  const json summary = summary_json(rc, eps, pooled);

  write_file(dir / "metrics.csv", metrics.str());
  write_file(dir / "losses.csv", losses.str());
  write_file(dir / "filter_trace.csv", trace.str());
  write_file(dir / "imu.csv", imu.str());
  write_file(dir / "summary.json", summary.dump(2) + "\n");

  std::printf("%-26s %s\n", "degradation", to_string(rc.episode.degradation).c_str());
  std::printf("%-26s %zu x %zu frames\n", "episodes", eps.size(), eps.front().metrics.frames.size());
  std::printf("%-26s %.6f\n", "scale ratio (median)", pooled.scale_ratio_median);
  std::printf("%-26s %.6f\n", "scale ratio (std)", pooled.scale_ratio_std);
  std::printf("%-26s %.6f\n", "vision-only ratio", pooled.scale_ratio_vis_median);
  std::printf("%-26s %.6f\n", "IMU-only ratio", pooled.scale_ratio_imu_median);
  std::printf("%-26s %.6f\n", "abs rel", pooled.abs_rel);
  std::printf("%-26s %.4f\n", "NEES (mean)", pooled.nees_mean);
  std::printf("%-26s %.4f\n", "fused better than vision", pooled.fused_better_fraction);
  std::printf("%-26s %s\n", "outputs", dir.string().c_str());
  return kExitOk;
}

json case_json(const RandomCase& c) {
  return {{"R_ckbt", mat_json(c.nom.R_ckbt)}, {"p_ckbt", vec_json(c.nom.p_ckbt)},
          {"v_ck", vec_json(c.nom.v_ck)},     {"g_ck", vec_json(c.nom.g_ck)},
          {"b_w", vec_json(c.nom.b_w)},       {"b_a", vec_json(c.nom.b_a)},
          {"w_m", vec_json(c.sample.w_m)},    {"a_m", vec_json(c.sample.a_m)},
          {"R_cb", mat_json(c.ex.R_cb())},    {"p_bc", vec_json(c.ex.p_bc())},
          {"phi", vec_json(c.phi)}};
}

int cmd_gradcheck(const Options& o) {
  GradcheckOptions go;
  go.seed = o.seed.value_or(0);
  go.tol = o.tol.value_or(1e-4);
  go.cases = o.cases;
  if (!(go.tol > 0.0)) throw cli::ConfigError("--tol must be positive");
  if (go.cases < 100) throw cli::ConfigError("--cases must be at least 100");
  if (o.mutate == "flip-gravity") {
    go.mutate_F = [](Mat18& f) { f.block<3, 3>(block::kVel, block::kGrav) *= -1.0; };
  } else if (!o.mutate.empty()) {
    throw cli::ConfigError("unknown --mutate fixture '" + o.mutate + "'");
  }
  const auto rep = gradcheck(go);

  json j;
  j["seed"] = rep.seed;
  j["cases"] = rep.cases;
  j["tol"] = rep.tol;
  j["passed"] = rep.passed;
  for (const auto& mc : rep.checks) {
    j["matrices"][mc.name] = {
        {"max_rel_error", mc.max_rel_error},
        {"passed", mc.passed},
        {"worst_case", mc.worst_case},
        {"worst_block", {{"row", mc.name == "Jl_inv" ? "phi" : mc.name == "H"
                                      ? (mc.worst_block_row == 0 ? "rot" : "trans")
                                      : state_block_name(mc.worst_block_row)},
                         {"col", mc.name == "Jl_inv" ? "phi" : state_block_name(mc.worst_block_col)},
                         {"rel_error", mc.worst_block_error}}}};
  }
  if (!rep.passed) j["failing_state"] = case_json(rep.worst);
  const std::string text = j.dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!o.out.empty()) write_file(prepare_out(o.out) / "gradcheck.json", text);
  return rep.passed ? kExitOk : kExitCheckFailed;
}

int cmd_preint_check(const Options& o) {
  if (!(o.duration > 0.0)) throw cli::ConfigError("--duration must be positive");
  if (!(o.rate >= 10.0)) throw cli::ConfigError("--rate must be at least 10");
  const auto rep = preint_check(o.rate, o.duration, o.seed.value_or(0));
  json j = {{"rate", rep.rate},
            {"duration", rep.duration},
            {"seed", rep.seed},
            {"position_error", rep.pos_error_truth},
            {"rotation_error", rep.rot_error_truth},
            {"position_error_vs_fine", rep.pos_error_fine},
            {"rotation_error_vs_fine", rep.rot_error_fine},
            {"position_bound", rep.pos_bound},
            {"rotation_bound", rep.rot_bound},
            {"passed", rep.passed}};
  const std::string text = j.dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!o.out.empty()) write_file(prepare_out(o.out) / "preint_check.json", text);
  return rep.passed ? kExitOk : kExitCheckFailed;
}

/// Evaluates the loss terms on one rendered triplet: fused motions are the
/// true ego-motions, visual motions are synthesized observations.
int cmd_losses(const Options& o) {
  if (o.config.empty()) throw cli::ConfigError("losses requires --config PATH");
  auto rc = cli::load_config(o.config);
  if (o.seed) rc.episode.seed = *o.seed;
  const auto& cfg = rc.episode;
  const auto& K = cfg.scene.intrinsics;
  const int k = rc.loss_frame;
  const auto ph = TrajectoryPhases::draw(cfg.trajectory.seed);
  const double dt_cam = 1.0 / cfg.trajectory.cam_rate;

  std::array<CameraPose, 3> poses;
  std::array<TrajectoryPoint, 3> pts;
  LossTriplet tri;
  for (int j = 0; j < 3; ++j) {
    pts[j] = trajectory_at(cfg.trajectory, ph, (k - 1 + j) * dt_cam);
    poses[j] = camera_pose(pts[j], cfg.extrinsics);
    auto view = render_scene(cfg.scene, poses[j]);
    tri.images[j] = std::move(view.image);
    if (j == 1) tri.depth = std::move(view.depth);
  }
  const auto e0 = relative_motion(poses[0], poses[1]);
  const auto e1 = relative_motion(poses[1], poses[2]);
  const Mat6 gamma = cfg.observation.gamma_actual();
  const auto o0 = synthesize_observation(e0, gamma, derive_seed(cfg.seed, stream::kObservation, k - 1),
                                         cfg.observation.scale);
  const auto o1 = synthesize_observation(e1, gamma, derive_seed(cfg.seed, stream::kObservation, k),
                                         cfg.observation.scale);
  const MotionPair vis{ego_from_xi(o0.xi), ego_from_xi(o1.xi).inverse()};
  const MotionPair fused{e0, e1.inverse()};

  const Mat3 r_cw = poses[1].R_wc.transpose();
  std::mt19937_64 rng(derive_seed(cfg.seed, stream::kInit, 0));
  std::normal_distribution<double> n(0.0, 1.0);
  const double sv = std::sqrt(cfg.initial_covariance.vel), sg = std::sqrt(cfg.initial_covariance.grav);
  const Vec3 v_ref = r_cw * pts[1].v, g_ref = r_cw * default_gravity_world();
  const Vec3 v_pred = v_ref + sv * Vec3(n(rng), n(rng), n(rng));
  const Vec3 g_pred = g_ref + sg * Vec3(n(rng), n(rng), n(rng));

  if (cfg.degradation == Degradation::kContrast) {
    for (int j = 0; j < 3; ++j) {
      tri.images[j] = apply_contrast(tri.images[j],
                                     draw_contrast(derive_seed(cfg.seed, stream::kContrast, k - 1 + j)));
    }
  } else if (cfg.degradation == Degradation::kOccluders) {
    for (int j = 0; j < 3; ++j) {
      tri.images[j] = apply_occluders(
          tri.images[j], draw_occluders(K, derive_seed(cfg.seed, stream::kOccluder, k - 1 + j)));
    }
  }
  const auto b = evaluate_losses(tri, vis, fused, K, vg_loss(v_pred, g_pred, v_ref, g_ref),
                                 cfg.loss_weights);
  json j = breakdown_json(b);
  const std::string text = j.dump(2) + "\n";
  std::fputs(text.c_str(), stdout);

  if (!o.out.empty()) {
    const fs::path dir = prepare_out(o.out);
    write_file(dir / "losses.json", text);
    const char* names[3] = {"source_prev", "target", "source_next"};
    for (int i = 0; i < 3; ++i) cli::write_png((dir / (std::string(names[i]) + ".png")).string(), tri.images[i]);
    const SourcePair sources{&tri.images[0], &tri.images[2]};
    const auto imu_map = imu_photometric_loss(tri.images[1], sources, tri.depth, fused, K,
                                              cfg.loss_weights.ssim_alpha);
    cli::write_png((dir / "error_imu.png").string(), imu_map.map);
    cli::write_float32((dir / "error_imu.f32").string(), imu_map.map.data(), imu_map.map.height(),
                       imu_map.map.width(), 1);
    cli::write_float32((dir / "depth.f32").string(), tri.depth.disparity().data(),
                       tri.depth.height(), tri.depth.width(), 1);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynafuse: camera-centric IMU/vision fusion simulator and checks"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool config, bool tol) {
    if (config) sub->add_option("--config", o.config, "Episode config (JSON)");
    sub->add_option("--seed", o.seed, "Random seed (default 0 or the config's seed)");
    sub->add_option("--out", o.out, "Output directory");
    if (tol) sub->add_option("--tol", o.tol, "Tolerance (default 1e-4)");
  };

  auto* sim = app.add_subcommand("simulate", "Run fusion episodes and write metrics");
  add_common(sim, true, false);
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of F, H and J_l^-1");
  add_common(grad, false, true);
  grad->add_option("--cases", o.cases, "Number of random states (>= 100)");
  grad->add_option("--mutate", o.mutate, "Test fixture: flip-gravity")->group("");
  auto* pre = app.add_subcommand("preint-check", "Preintegration vs pose composition");
  add_common(pre, false, false);
  pre->add_option("--rate", o.rate, "IMU rate in Hz (>= 10)");
  pre->add_option("--duration", o.duration, "Segment length in seconds (> 0)");
  auto* los = app.add_subcommand("losses", "Evaluate the loss terms on one rendered triplet");
  add_common(los, true, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (sim->parsed()) return cmd_simulate(o);
    if (grad->parsed()) return cmd_gradcheck(o);
    if (pre->parsed()) return cmd_preint_check(o);
    if (los->parsed()) return cmd_losses(o);
  } catch (const cli::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  }
  return kExitUsage;
}
