#pragma once

// Procedural textured plane rendered by ray casting, plus the two
// vision-degradation modes (contrast jitter and black occluders).

#include "dynafuse/image.hpp"
#include "dynafuse/trajectory.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynafuse {

/// The plane {X : n·X = d} carrying a sum-of-sinusoids texture.
struct SceneSpec {
  Vec3 plane_normal = Vec3(0.0, 1.0, 0.0);
  double plane_distance = 10.0;  ///< m
  int octaves = 3;
  double base_frequency = 0.15;  ///< cycles / m
  double amplitude = 0.25;       ///< first octave; halves per octave
  std::uint64_t texture_seed = 7;
  CameraIntrinsics intrinsics;
  double depth_cap = kDefaultDepthCap;

  void validate() const {
    if (!plane_normal.allFinite() || std::abs(plane_normal.norm() - 1.0) > 1e-9) {
      throw std::invalid_argument("plane normal must be a unit vector");
    }
    if (!std::isfinite(plane_distance)) throw std::invalid_argument("plane distance not finite");
    if (octaves < 1 || octaves > 12) throw std::invalid_argument("octaves must lie in [1, 12]");
    if (!(base_frequency > 0.0)) throw std::invalid_argument("base_frequency must be positive");
    if (!(amplitude >= 0.0 && amplitude * 2.0 <= 0.5 + 1e-12)) {
      throw std::invalid_argument("amplitude must lie in [0, 0.25]");
    }
    if (!(depth_cap > 0.0)) throw std::invalid_argument("depth_cap must be positive");
    intrinsics.validate();
  }
};

inline constexpr double kMinSceneDepth = 0.1;

/// Texture evaluated at a 3-D point; view independent by construction.
class PlaneTexture {
 public:
  explicit PlaneTexture(const SceneSpec& s) : spec_(s) {
    const Vec3& n = s.plane_normal;
    const Vec3 helper = std::abs(n.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
    e1_ = helper.cross(n).normalized();
    e2_ = n.cross(e1_);
    std::mt19937_64 rng(s.texture_seed);
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    phases_.resize(static_cast<std::size_t>(s.octaves));
    for (auto& oct : phases_)
      for (auto& ch : oct)
        for (auto& p : ch) p = u(rng);
  }

  ImageBuffer::Pixel operator()(const Vec3& x) const {
    const double s = e1_.dot(x), t = e2_.dot(x);
    ImageBuffer::Pixel out = ImageBuffer::Pixel::Constant(0.5);
    double amp = spec_.amplitude, freq = spec_.base_frequency;
    for (const auto& oct : phases_) {
      const double w = 2.0 * std::numbers::pi * freq;
      for (int c = 0; c < 3; ++c) {
        out[c] += amp * std::sin(w * s + oct[c][0]) * std::cos(1.3 * w * t + oct[c][1]);
      }
      amp *= 0.5;
      freq *= 2.0;
    }
    return out;
  }

 private:
  SceneSpec spec_;
  Vec3 e1_, e2_;
  std::vector<std::array<std::array<double, 2>, 3>> phases_;
};

/// Depth (camera z) of the plane along the ray through pixel (u, v), or a
/// non-positive value when the ray misses the front of the plane.
inline double scene_depth_at(const SceneSpec& scene, const CameraPose& pose, double u, double v) {
  const Vec3 ray_c = scene.intrinsics.K_inv() * Vec3(u, v, 1.0);
  const Vec3 ray_w = pose.R_wc * ray_c;
  const double denom = scene.plane_normal.dot(ray_w);
  if (std::abs(denom) < 1e-12) return -1.0;
  return (scene.plane_distance - scene.plane_normal.dot(pose.p_wc)) / denom;
}

struct RenderedView {
  ImageBuffer image;
  DepthMap depth;
};

inline RenderedView render_scene(const SceneSpec& scene, const CameraPose& pose) {
  scene.validate();
  const auto& K = scene.intrinsics;
  const PlaneTexture texture(scene);
  RenderedView out{ImageBuffer(K.height, K.width), DepthMap(K.height, K.width, scene.depth_cap)};
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      const double z = scene_depth_at(scene, pose, x, y);
      if (!(z > kMinSceneDepth)) {
        throw std::invalid_argument("render_scene: plane behind or too close to the camera at pixel (" +
                                    std::to_string(x) + ", " + std::to_string(y) + ")");
      }
      const Vec3 xw = pose.p_wc + pose.R_wc * (z * (K.K_inv() * Vec3(x, y, 1.0)));
      out.image.set_pixel(y, x, texture(xw));
      out.depth.set(y, x, z);
    }
  }
  out.image.clamp_unit();
  return out;
}

// ---------------------------------------------------------------------------
// Degradations

enum class Degradation { kNone, kContrast, kOccluders };

inline std::string to_string(Degradation d) {
  switch (d) {
    case Degradation::kNone: return "none";
    case Degradation::kContrast: return "contrast";
    case Degradation::kOccluders: return "occluders";
  }
  return "unknown";
}

inline Degradation degradation_from_string(const std::string& s) {
  if (s == "none") return Degradation::kNone;
  if (s == "contrast") return Degradation::kContrast;
  if (s == "occluders") return Degradation::kOccluders;
  throw std::invalid_argument("unknown degradation '" + s + "'");
}

/// I' = c·I + (1 − c)·mean(I), clamped to [0, 1].
inline ImageBuffer apply_contrast(const ImageBuffer& img, double c) {
  ImageBuffer out = img;
  const double mean = pairwise_sum(img.data()) / static_cast<double>(img.data().size());
  for (auto& v : out.data()) v = c * v + (1.0 - c) * mean;
  out.clamp_unit();
  return out;
}

inline constexpr double kContrastRange = 0.5;

inline double draw_contrast(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return std::uniform_real_distribution<double>(1.0 - kContrastRange, 1.0 + kContrastRange)(rng);
}

struct Occluder {
  int x0 = 0, y0 = 0, w = 0, h = 0;
  Eigen::Vector2d center() const { return {x0 + 0.5 * (w - 1), y0 + 0.5 * (h - 1)}; }
};

using OccluderLayout = std::array<Occluder, 3>;

/// Three black rectangles sized like 150×150 squares on a 640×192 image,
/// rescaled per axis to the current resolution, placed uniformly at random.
inline OccluderLayout draw_occluders(const CameraIntrinsics& K, std::uint64_t seed) {
  const int w = std::max(1, static_cast<int>(std::lround(150.0 * K.width / 640.0)));
  const int h = std::max(1, static_cast<int>(std::lround(150.0 * K.height / 192.0)));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> ux(0, std::max(0, K.width - w));
  std::uniform_int_distribution<int> uy(0, std::max(0, K.height - h));
  OccluderLayout out;
  for (auto& o : out) {
    o.w = std::min(w, K.width);
    o.h = std::min(h, K.height);
    o.x0 = ux(rng);
    o.y0 = uy(rng);
  }
  return out;
}

inline double occluded_fraction(const OccluderLayout& layout, int width, int height) {
  std::size_t n = 0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (const auto& o : layout) {
        if (x >= o.x0 && x < o.x0 + o.w && y >= o.y0 && y < o.y0 + o.h) {
          ++n;
          break;
        }
      }
    }
  }
  return static_cast<double>(n) / (static_cast<double>(width) * height);
}

inline ImageBuffer apply_occluders(const ImageBuffer& img, const OccluderLayout& layout) {
  ImageBuffer out = img;
  for (const auto& o : layout)
    for (int y = o.y0; y < std::min(o.y0 + o.h, img.height()); ++y)
      for (int x = o.x0; x < std::min(o.x0 + o.w, img.width()); ++x)
        out.set_pixel(y, x, ImageBuffer::Pixel::Zero());
  return out;
}

}  // namespace dynafuse
