#pragma once

// JSON episode configs. Unknown keys are rejected so typos surface as
// config errors instead of silently falling back to defaults.

#include "dynafuse/harness.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

namespace dynafuse::cli {

using nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  EpisodeConfig episode;
  int episodes = 1;
  int loss_frame = 1;  ///< target camera index for `losses`
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

inline Vec3 vec3(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(where + ": expected a 3-element array");
  Vec3 v;
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_number()) throw ConfigError(where + ": expected numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

template <class T>
void get(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void get_vec3(const json& j, const char* key, Vec3& out, const std::string& where) {
  if (j.contains(key)) out = vec3(j.at(key), where + "." + key);
}

inline void parse_trajectory(const json& j, TrajectorySpec& t) {
  const std::string w = "trajectory";
  check_keys(j, {"kind", "duration", "imu_rate", "cam_rate", "p0", "rpy0", "velocity",
                 "position_amplitude", "position_frequency", "attitude_amplitude",
                 "attitude_frequency", "twist_linear", "twist_angular", "seed"}, w);
  if (j.contains("kind")) {
    try {
      t.kind = trajectory_kind_from_string(j.at("kind").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(w + ".kind: " + e.what());
    }
  }
  get(j, "duration", t.duration, w);
  get(j, "imu_rate", t.imu_rate, w);
  get(j, "cam_rate", t.cam_rate, w);
  get_vec3(j, "p0", t.p0, w);
  get_vec3(j, "rpy0", t.rpy0, w);
  get_vec3(j, "velocity", t.velocity, w);
  get_vec3(j, "position_amplitude", t.position_amplitude, w);
  get(j, "position_frequency", t.position_frequency, w);
  get_vec3(j, "attitude_amplitude", t.attitude_amplitude, w);
  get(j, "attitude_frequency", t.attitude_frequency, w);
  get_vec3(j, "twist_linear", t.twist_linear, w);
  get_vec3(j, "twist_angular", t.twist_angular, w);
  get(j, "seed", t.seed, w);
}

inline void parse_scene(const json& j, SceneSpec& s) {
  const std::string w = "scene";
  check_keys(j, {"plane_normal", "plane_distance", "octaves", "base_frequency", "amplitude",
                 "texture_seed", "depth_cap", "intrinsics"}, w);
  get_vec3(j, "plane_normal", s.plane_normal, w);
  get(j, "plane_distance", s.plane_distance, w);
  get(j, "octaves", s.octaves, w);
  get(j, "base_frequency", s.base_frequency, w);
  get(j, "amplitude", s.amplitude, w);
  get(j, "texture_seed", s.texture_seed, w);
  get(j, "depth_cap", s.depth_cap, w);
  if (j.contains("intrinsics")) {
    const auto& k = j.at("intrinsics");
    const std::string wk = w + ".intrinsics";
    check_keys(k, {"fx", "fy", "cx", "cy", "width", "height"}, wk);
    get(k, "fx", s.intrinsics.fx, wk);
    get(k, "fy", s.intrinsics.fy, wk);
    get(k, "cx", s.intrinsics.cx, wk);
    get(k, "cy", s.intrinsics.cy, wk);
    get(k, "width", s.intrinsics.width, wk);
    get(k, "height", s.intrinsics.height, wk);
  }
}

inline void parse_noise(const json& j, ImuNoiseParams& n, const std::string& w) {
  if (j.is_string()) {
    if (j.get<std::string>() == "consumer_grade") { n = ImuNoiseParams::consumer_grade(); return; }
    if (j.get<std::string>() == "zero") { n = ImuNoiseParams{}; return; }
    throw ConfigError(w + ": unknown preset '" + j.get<std::string>() + "'");
  }
  check_keys(j, {"sigma_w", "sigma_bw", "sigma_a", "sigma_ba"}, w);
  get(j, "sigma_w", n.sigma_w, w);
  get(j, "sigma_bw", n.sigma_bw, w);
  get(j, "sigma_a", n.sigma_a, w);
  get(j, "sigma_ba", n.sigma_ba, w);
}

inline void parse_observation(const json& j, ObservationSpec& o) {
  const std::string w = "observation";
  check_keys(j, {"sigma_rot", "sigma_trans", "reported_sigma_rot", "reported_sigma_trans",
                 "scale"}, w);
  get(j, "sigma_rot", o.sigma_rot, w);
  get(j, "sigma_trans", o.sigma_trans, w);
  get(j, "reported_sigma_rot", o.reported_sigma_rot, w);
  get(j, "reported_sigma_trans", o.reported_sigma_trans, w);
  get(j, "scale", o.scale, w);
}

inline void parse_initial_covariance(const json& j, InitialCovariance& c) {
  const std::string w = "initial_covariance";
  check_keys(j, {"rot", "pos", "vel", "grav", "gyro_bias", "accel_bias"}, w);
  get(j, "rot", c.rot, w);
  get(j, "pos", c.pos, w);
  get(j, "vel", c.vel, w);
  get(j, "grav", c.grav, w);
  get(j, "gyro_bias", c.gyro_bias, w);
  get(j, "accel_bias", c.accel_bias, w);
}

inline void parse_weights(const json& j, LossWeights& lw) {
  const std::string w = "loss_weights";
  check_keys(j, {"lambda1", "lambda2", "lambda3", "lambda4", "ssim_alpha"}, w);
  get(j, "lambda1", lw.lambda1, w);
  get(j, "lambda2", lw.lambda2, w);
  get(j, "lambda3", lw.lambda3, w);
  get(j, "lambda4", lw.lambda4, w);
  get(j, "ssim_alpha", lw.ssim_alpha, w);
}

inline Extrinsics parse_extrinsics(const json& j) {
  const std::string w = "extrinsics";
  check_keys(j, {"mount", "R_cb", "p_bc"}, w);
  Vec3 p_bc(0.05, 0.02, 0.03);
  get_vec3(j, "p_bc", p_bc, w);
  if (j.contains("R_cb")) {
    const auto& r = j.at("R_cb");
    if (!r.is_array() || r.size() != 3) throw ConfigError(w + ".R_cb: expected 3 rows");
    Mat3 m;
    for (int i = 0; i < 3; ++i) m.row(i) = vec3(r[i], w + ".R_cb").transpose();
    try {
      return Extrinsics(m, p_bc);
    } catch (const std::exception& e) {
      throw ConfigError(w + ".R_cb: " + e.what());
    }
  }
  std::string mount = "side";
  get(j, "mount", mount, w);
  if (mount == "side") return side_looking_extrinsics(p_bc);
  if (mount == "identity") return Extrinsics(Mat3::Identity(), p_bc);
  throw ConfigError(w + ".mount: unknown mount '" + mount + "'");
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
  RunConfig rc;
  auto& e = rc.episode;
  detail::check_keys(j, {"seed", "episodes", "loss_every", "loss_frame", "degradation",
                         "perturb_initial_state", "trajectory", "scene", "imu_noise", "filter_imu_noise",
                         "observation", "extrinsics", "initial_covariance", "loss_weights"},
                     "config");
  detail::get(j, "seed", e.seed, "config");
  detail::get(j, "episodes", rc.episodes, "config");
  detail::get(j, "loss_every", e.loss_every, "config");
  detail::get(j, "loss_frame", rc.loss_frame, "config");
  detail::get(j, "perturb_initial_state", e.perturb_initial_state, "config");
  if (j.contains("degradation")) {
    try {
      e.degradation = degradation_from_string(j.at("degradation").get<std::string>());
    } catch (const std::exception& ex) {
      throw ConfigError(std::string("config.degradation: ") + ex.what());
    }
  }
  if (j.contains("trajectory")) detail::parse_trajectory(j.at("trajectory"), e.trajectory);
  if (j.contains("scene")) detail::parse_scene(j.at("scene"), e.scene);
  if (j.contains("imu_noise")) detail::parse_noise(j.at("imu_noise"), e.imu_noise, "imu_noise");
  if (j.contains("filter_imu_noise")) {
    e.filter_imu_noise = ImuNoiseParams{};
    detail::parse_noise(j.at("filter_imu_noise"), *e.filter_imu_noise, "filter_imu_noise");
  }
  if (j.contains("observation")) detail::parse_observation(j.at("observation"), e.observation);
  if (j.contains("extrinsics")) e.extrinsics = detail::parse_extrinsics(j.at("extrinsics"));
  if (j.contains("initial_covariance")) {
    detail::parse_initial_covariance(j.at("initial_covariance"), e.initial_covariance);
  }
  if (j.contains("loss_weights")) detail::parse_weights(j.at("loss_weights"), e.loss_weights);

  if (rc.episodes < 1) throw ConfigError("config.episodes must be at least 1");
  try {
    e.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  if (rc.loss_frame < 1 || rc.loss_frame >= e.trajectory.frame_count()) {
    throw ConfigError("config.loss_frame must lie in [1, frame_count - 1]");
  }
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse config file '" + path + "': " + e.what());
  }
  return parse_config(j);
}

}  // namespace dynafuse::cli
