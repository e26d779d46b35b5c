#pragma once

// Backwarping geometry, SSIM and the view-synthesis losses.
//
// A warp motion {R, p} maps target-camera coordinates into source-camera
// coordinates (X_s = R·X_t + p). For a target frame k and source k+1 this
// is the inverse of the ego-motion c_k → c_{k+1}; for source k−1 it is the
// ego-motion c_{k−1} → c_k itself.

#include "dynafuse/image.hpp"
#include "dynafuse/imu.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace dynafuse {

struct LossWeights {
  double lambda1 = 0.001;  ///< smoothness
  double lambda2 = 0.5;    ///< IMU photometric
  double lambda3 = 0.01;   ///< cross-sensor consistency
  double lambda4 = 0.001;  ///< velocity/gravity
  double ssim_alpha = 0.85;

  void validate() const {
    if (!(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0 && lambda4 >= 0)) {
      throw std::invalid_argument("loss weights must be non-negative");
    }
    if (!(ssim_alpha >= 0 && ssim_alpha <= 1)) {
      throw std::invalid_argument("ssim_alpha must lie in [0, 1]");
    }
  }
};

struct WarpedPixel {
  Eigen::Vector2d uv = Eigen::Vector2d::Zero();
  bool valid = false;
};

/// ψ(K R K⁻¹ y + K p / z) with ψ the perspective division.
inline WarpedPixel warp_pixel(const Eigen::Vector2d& y, double z, const CameraIntrinsics& K,
                              const CameraEgoMotion& motion) {
  if (!(z > 0.0)) throw std::invalid_argument("warp_pixel: depth must be positive");
  const Eigen::Vector3d ray = K.K_inv() * Eigen::Vector3d(y.x(), y.y(), 1.0);
  const Eigen::Vector3d q = K.K() * (motion.R * ray + motion.p / z);
  WarpedPixel out;
  if (!(q.z() > 1e-6)) return out;
  out.uv = q.head<2>() / q.z();
  out.valid = K.inside(out.uv.x(), out.uv.y());
  return out;
}

struct Backwarped {
  ImageBuffer image;
  std::vector<std::uint8_t> mask;  ///< 1 where the warp landed inside the source
};

/// Reconstruct the target view by sampling `source` through depth and motion.
/// Pixels with an invalid warp or invalid depth are zero and masked out.
inline Backwarped backwarp(const ImageBuffer& source, const DepthMap& depth,
                           const CameraIntrinsics& K, const CameraEgoMotion& motion) {
  const int h = depth.height(), w = depth.width();
  Backwarped out{ImageBuffer(h, w, 0.0), std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  const Eigen::Matrix3d krk = K.K() * motion.R * K.K_inv();
  const Eigen::Vector3d kp = K.K() * motion.p;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!depth.valid(y, x)) continue;
      const Eigen::Vector3d q = krk * Eigen::Vector3d(x, y, 1.0) + kp / depth.at(y, x);
      if (!(q.z() > 1e-6)) continue;
      const auto s = source.sample(q.x() / q.z(), q.y() / q.z());
      if (!s) continue;
      out.image.set_pixel(y, x, *s);
      out.mask[static_cast<std::size_t>(y) * w + x] = 1;
    }
  }
  return out;
}

namespace detail {

inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

inline void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": image shapes differ");
  }
}

}  // namespace detail

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Per-pixel, per-channel SSIM with 3×3 mean filtering (reflection padding).
inline ImageBuffer ssim(const ImageBuffer& a, const ImageBuffer& b) {
  detail::require_same_shape(a, b, "ssim");
  const int h = a.height(), w = a.width();
  ImageBuffer out(h, w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ImageBuffer::kChannels; ++c) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = detail::reflect(y + dy, h);
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = detail::reflect(x + dx, w);
            const double va = a.at(yy, xx, c), vb = b.at(yy, xx, c);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        }
        const double mu_a = sa / 9.0, mu_b = sb / 9.0;
        const double var_a = saa / 9.0 - mu_a * mu_a;
        const double var_b = sbb / 9.0 - mu_b * mu_b;
        const double cov = sab / 9.0 - mu_a * mu_b;
        const double num = (2.0 * mu_a * mu_b + kSsimC1) * (2.0 * cov + kSsimC2);
        const double den = (mu_a * mu_a + mu_b * mu_b + kSsimC1) * (var_a + var_b + kSsimC2);
        out.at(y, x, c) = std::clamp(num / den, -1.0, 1.0);
      }
    }
  }
  return out;
}

/// α(1 − SSIM)/2 + (1 − α)|I − I'|, both terms averaged over channels.
inline ScalarMap photometric_error(const ImageBuffer& target, const ImageBuffer& warped,
                                   double alpha) {
  detail::require_same_shape(target, warped, "photometric_error");
  const ImageBuffer s = ssim(target, warped);
  ScalarMap out(target.height(), target.width());
  constexpr double inv_c = 1.0 / ImageBuffer::kChannels;
  for (int y = 0; y < target.height(); ++y) {
    for (int x = 0; x < target.width(); ++x) {
      double dssim = 0.0, l1 = 0.0;
      for (int c = 0; c < ImageBuffer::kChannels; ++c) {
        dssim += 0.5 * (1.0 - s.at(y, x, c));
        l1 += std::abs(target.at(y, x, c) - warped.at(y, x, c));
      }
      out.at(y, x) = alpha * dssim * inv_c + (1.0 - alpha) * l1 * inv_c;
    }
  }
  return out;
}

/// Scalar loss plus the per-pixel map it averages. Pixels that never had a
/// valid warp are NaN in `map`.
struct LossMap {
  double value = 0.0;
  std::size_t n_valid = 0;
  ScalarMap map;
};

using SourcePair = std::array<const ImageBuffer*, 2>;
using MotionPair = std::array<CameraEgoMotion, 2>;

namespace detail {

/// Per-pixel minimum over the δ for which the pixel is valid, then the mean
/// over pixels valid for at least one δ.
inline LossMap min_over_sources(const std::array<ScalarMap, 2>& err,
                                const std::array<std::vector<std::uint8_t>, 2>& valid) {
  const int h = err[0].height(), w = err[0].width();
  LossMap out{0.0, 0, ScalarMap(h, w, std::numeric_limits<double>::quiet_NaN())};
  std::vector<double> used;
  used.reserve(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      double best = std::numeric_limits<double>::infinity();
      for (int d = 0; d < 2; ++d)
        if (valid[d][i]) best = std::min(best, err[d].at(y, x));
      if (std::isfinite(best)) {
        out.map.at(y, x) = best;
        used.push_back(best);
      }
    }
  }
  if (used.empty()) throw NumericError("photometric loss: no valid pixels");
  out.n_valid = used.size();
  out.value = pairwise_sum(used) / static_cast<double>(used.size());
  return out;
}

}  // namespace detail

/// View-synthesis loss of the target against both neighbours, warped with
/// the given motions (target → source).
inline LossMap imu_photometric_loss(const ImageBuffer& target, const SourcePair& sources,
                                    const DepthMap& depth, const MotionPair& motions,
                                    const CameraIntrinsics& K, double alpha) {
  std::array<ScalarMap, 2> err;
  std::array<std::vector<std::uint8_t>, 2> valid;
  for (int d = 0; d < 2; ++d) {
    detail::require_same_shape(target, *sources[d], "imu_photometric_loss");
    auto bw = backwarp(*sources[d], depth, K, motions[d]);
    // Invalid pixels copy the target so they do not leak into SSIM windows.
    for (int y = 0; y < target.height(); ++y)
      for (int x = 0; x < target.width(); ++x)
        if (!bw.mask[static_cast<std::size_t>(y) * target.width() + x])
          bw.image.set_pixel(y, x, target.pixel(y, x));
    err[d] = photometric_error(target, bw.image, alpha);
    valid[d] = std::move(bw.mask);
  }
  return detail::min_over_sources(err, valid);
}

/// Photometric error between the two reconstructions of the target sampled
/// from the same source with the visual and the fused motions.
inline LossMap cross_sensor_loss(const SourcePair& sources, const DepthMap& depth,
                                 const MotionPair& motions_vis, const MotionPair& motions_fused,
                                 const CameraIntrinsics& K, double alpha) {
  std::array<ScalarMap, 2> err;
  std::array<std::vector<std::uint8_t>, 2> valid;
  for (int d = 0; d < 2; ++d) {
    auto vis = backwarp(*sources[d], depth, K, motions_vis[d]);
    auto fused = backwarp(*sources[d], depth, K, motions_fused[d]);
    valid[d].resize(vis.mask.size());
    for (std::size_t i = 0; i < vis.mask.size(); ++i) valid[d][i] = vis.mask[i] && fused.mask[i];
    // Outside the joint mask both reconstructions hold the same value.
    const int w = depth.width();
    for (int y = 0; y < depth.height(); ++y)
      for (int x = 0; x < w; ++x)
        if (!valid[d][static_cast<std::size_t>(y) * w + x])
          vis.image.set_pixel(y, x, fused.image.pixel(y, x));
    err[d] = photometric_error(vis.image, fused.image, alpha);
  }
  return detail::min_over_sources(err, valid);
}

/// Edge-aware first-order smoothness on mean-normalized disparity:
/// mean |∂x d|·exp(−|∂x I|) + mean |∂y d|·exp(−|∂y I|).
inline double smoothness_loss(const ScalarMap& disparity, const ImageBuffer& image) {
  const int h = disparity.height(), w = disparity.width();
  if (h != image.height() || w != image.width()) {
    throw std::invalid_argument("smoothness_loss: shapes differ");
  }
  const double mean = pairwise_sum(disparity.data()) / static_cast<double>(disparity.size());
  const double scale = mean > 0.0 ? 1.0 / mean : 0.0;
  const auto image_grad = [&](int y0, int x0, int y1, int x1) {
    double g = 0.0;
    for (int c = 0; c < ImageBuffer::kChannels; ++c)
      g += std::abs(image.at(y1, x1, c) - image.at(y0, x0, c));
    return g / ImageBuffer::kChannels;
  };

  std::vector<double> gx, gy;
  gx.reserve(static_cast<std::size_t>(h) * (w - 1));
  gy.reserve(static_cast<std::size_t>(h - 1) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      gx.push_back(std::abs(disparity.at(y, x + 1) - disparity.at(y, x)) * scale *
                   std::exp(-image_grad(y, x, y, x + 1)));
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      gy.push_back(std::abs(disparity.at(y + 1, x) - disparity.at(y, x)) * scale *
                   std::exp(-image_grad(y, x, y + 1, x)));
  const double mx = gx.empty() ? 0.0 : pairwise_sum(gx) / static_cast<double>(gx.size());
  const double my = gy.empty() ? 0.0 : pairwise_sum(gy) / static_cast<double>(gy.size());
  return mx + my;
}

inline double vg_loss(const Vec3& v_pred, const Vec3& g_pred, const Vec3& v_ref,
                      const Vec3& g_ref) {
  return (v_pred - v_ref).squaredNorm() + (g_pred - g_ref).squaredNorm();
}

struct LossComponents {
  double l_vis = 0.0;
  double l_s = 0.0;
  double l_imu = 0.0;
  double l_cons = 0.0;
  double l_vg = 0.0;
};

struct LossBreakdown : LossComponents {
  double total = 0.0;
};

inline LossBreakdown total_loss(const LossComponents& c, const LossWeights& w = {}) {
  w.validate();
  LossBreakdown out;
  static_cast<LossComponents&>(out) = c;
  out.total = c.l_vis + w.lambda1 * c.l_s + w.lambda2 * c.l_imu + w.lambda3 * c.l_cons +
              w.lambda4 * c.l_vg;
  return out;
}

}  // namespace dynafuse
