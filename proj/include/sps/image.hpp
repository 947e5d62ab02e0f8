#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <vector>

#include "sps/errors.hpp"

namespace sps {

struct PixelCoord {
  int u = 0;
  int v = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
  friend auto operator<=>(const PixelCoord&, const PixelCoord&) = default;
};

/// Row-major 2D grid of values.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, const T& fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(checked_area(width, height)), fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool contains(int u, int v) const {
    return u >= 0 && v >= 0 && u < width_ && v < height_;
  }

  T& operator()(int u, int v) { return data_[index(u, v)]; }
  const T& operator()(int u, int v) const { return data_[index(u, v)]; }
  T& operator()(PixelCoord p) { return (*this)(p.u, p.v); }
  const T& operator()(PixelCoord p) const { return (*this)(p.u, p.v); }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  static long checked_area(int w, int h) {
    if (w <= 0 || h <= 0) throw InputError("grid dimensions must be positive");
    return static_cast<long>(w) * h;
  }
  std::size_t index(int u, int v) const {
    return static_cast<std::size_t>(v) * width_ + u;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using Rgb = Eigen::Vector3f;

/// RGB image with channels in [0, 1].
using ColorImage = Grid<Rgb>;

using LabelMap = Grid<std::int32_t>;

using DepthMap = Grid<float>;

/// Dense displacement field from the reference frame to the next frame.
/// NaN components mark pixels without a valid correspondence.
class FlowField {
 public:
  FlowField() = default;
  FlowField(int width, int height)
      : du_(width, height, 0.f), dv_(width, height, 0.f) {}

  int width() const { return du_.width(); }
  int height() const { return du_.height(); }

  float& du(int u, int v) { return du_(u, v); }
  float& dv(int u, int v) { return dv_(u, v); }
  float du(int u, int v) const { return du_(u, v); }
  float dv(int u, int v) const { return dv_(u, v); }

  bool valid(int u, int v) const {
    return std::isfinite(du_(u, v)) && std::isfinite(dv_(u, v));
  }

  Grid<std::uint8_t> validity_mask() const {
    Grid<std::uint8_t> mask(width(), height(), 0);
    for (int v = 0; v < height(); ++v)
      for (int u = 0; u < width(); ++u) mask(u, v) = valid(u, v) ? 1 : 0;
    return mask;
  }

 private:
  Grid<float> du_;
  Grid<float> dv_;
};

}  // namespace sps
