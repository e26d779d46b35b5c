#pragma once

// Image grids used by the photometric losses: RGB intensity buffers,
// scalar maps (error maps, disparity) and depth maps with a validity mask.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynafuse {

struct CameraIntrinsics {
  double fx = 120.0;
  double fy = 120.0;
  double cx = 79.5;
  double cy = 59.5;
  int width = 160;
  int height = 120;

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw std::invalid_argument("focal lengths must be positive");
    if (width <= 1 || height <= 1) throw std::invalid_argument("image must be at least 2x2");
    if (!(cx >= 0 && cx <= width - 1 && cy >= 0 && cy <= height - 1)) {
      throw std::invalid_argument("principal point outside the image");
    }
  }

  Eigen::Matrix3d K() const {
    Eigen::Matrix3d k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }
  Eigen::Matrix3d K_inv() const {
    Eigen::Matrix3d k;
    k << 1 / fx, 0, -cx / fx, 0, 1 / fy, -cy / fy, 0, 0, 1;
    return k;
  }
  bool inside(double u, double v) const {
    return u >= 0.0 && v >= 0.0 && u <= width - 1 && v <= height - 1;
  }
};

/// Row-major h×w grid of doubles.
class ScalarMap {
 public:
  ScalarMap() = default;
  ScalarMap(int height, int width, double fill = 0.0)
      : h_(height), w_(width), data_(static_cast<std::size_t>(height) * width, fill) {}

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }

  double& at(int y, int x) { return data_[index(y, x)]; }
  double at(int y, int x) const { return data_[index(y, x)]; }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

 private:
  std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * w_ + x; }
  int h_ = 0;
  int w_ = 0;
  std::vector<double> data_;
};

/// h×w grid of RGB intensities in [0, 1].
class ImageBuffer {
 public:
  static constexpr int kChannels = 3;
  using Pixel = Eigen::Vector3d;

  ImageBuffer() = default;
  ImageBuffer(int height, int width, double fill = 0.0)
      : h_(height), w_(width),
        data_(static_cast<std::size_t>(height) * width * kChannels, fill) {}

  int height() const { return h_; }
  int width() const { return w_; }
  bool same_shape(const ImageBuffer& o) const { return h_ == o.h_ && w_ == o.w_; }

  double& at(int y, int x, int c) { return data_[index(y, x) + c]; }
  double at(int y, int x, int c) const { return data_[index(y, x) + c]; }

  Pixel pixel(int y, int x) const {
    const std::size_t i = index(y, x);
    return {data_[i], data_[i + 1], data_[i + 2]};
  }
  void set_pixel(int y, int x, const Pixel& p) {
    const std::size_t i = index(y, x);
    data_[i] = p.x();
    data_[i + 1] = p.y();
    data_[i + 2] = p.z();
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  /// Bilinear sample at column u, row v. Taps outside the grid get zero
  /// weight; positions outside [0, w−1]×[0, h−1] return nullopt.
  std::optional<Pixel> sample(double u, double v) const {
    if (!(u >= 0.0 && v >= 0.0 && u <= w_ - 1 && v <= h_ - 1)) return std::nullopt;
    const int x0 = static_cast<int>(std::floor(u));
    const int y0 = static_cast<int>(std::floor(v));
    const double fx = u - x0;
    const double fy = v - y0;
    Pixel out = Pixel::Zero();
    const auto tap = [&](int y, int x, double wgt) {
      if (wgt == 0.0 || x >= w_ || y >= h_) return;
      out += wgt * pixel(y, x);
    };
    tap(y0, x0, (1 - fx) * (1 - fy));
    tap(y0, x0 + 1, fx * (1 - fy));
    tap(y0 + 1, x0, (1 - fx) * fy);
    tap(y0 + 1, x0 + 1, fx * fy);
    return out;
  }

  void clamp_unit() {
    for (auto& v : data_) v = std::clamp(v, 0.0, 1.0);
  }

 private:
  std::size_t index(int y, int x) const {
    return (static_cast<std::size_t>(y) * w_ + x) * kChannels;
  }
  int h_ = 0;
  int w_ = 0;
  std::vector<double> data_;
};

inline constexpr double kDefaultDepthCap = 80.0;

/// Positive depths (m) with a validity mask; values are capped.
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(int height, int width, double cap = kDefaultDepthCap)
      : depth_(height, width, 0.0), valid_(static_cast<std::size_t>(height) * width, 0),
        cap_(cap) {}

  int height() const { return depth_.height(); }
  int width() const { return depth_.width(); }
  double cap() const { return cap_; }

  void set(int y, int x, double z) {
    const bool ok = std::isfinite(z) && z > 0.0;
    depth_.at(y, x) = ok ? std::min(z, cap_) : 0.0;
    valid_[static_cast<std::size_t>(y) * width() + x] = ok ? 1 : 0;
  }
  double at(int y, int x) const { return depth_.at(y, x); }
  bool valid(int y, int x) const { return valid_[static_cast<std::size_t>(y) * width() + x]; }

  DepthMap scaled(double s) const {
    DepthMap out(height(), width(), cap_);
    for (int y = 0; y < height(); ++y)
      for (int x = 0; x < width(); ++x)
        if (valid(y, x)) out.set(y, x, at(y, x) * s);
    return out;
  }

  /// 1/z on valid pixels, 0 elsewhere.
  ScalarMap disparity() const {
    ScalarMap d(height(), width(), 0.0);
    for (int y = 0; y < height(); ++y)
      for (int x = 0; x < width(); ++x)
        if (valid(y, x)) d.at(y, x) = 1.0 / at(y, x);
    return d;
  }

 private:
  ScalarMap depth_;
  std::vector<std::uint8_t> valid_;
  double cap_ = kDefaultDepthCap;
};

/// Pairwise (cascade) summation; the result depends only on the element
/// order, not on how callers partition the work.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

}  // namespace dynafuse
