#pragma once

// Depth metrics (mean relative error after global-scale alignment) and
// reconstruction exports.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include <json.hpp>

#include "sps/energy.hpp"
#include "sps/errors.hpp"
#include "sps/image.hpp"
#include "sps/io.hpp"

namespace sps {

/// Per-pixel depth of the scaled piecewise-planar state; NaN where a
/// patch's plane does not lie in front of the camera.
inline DepthMap depth_from_state(const SceneContext& ctx, const SceneState& state) {
  DepthMap depth(ctx.width, ctx.height, std::numeric_limits<float>::quiet_NaN());
  for (int i = 0; i < ctx.size(); ++i) {
    const auto& p = state.patches[i];
    for (const auto& px : ctx.superpixels[i].pixels) {
      const double z = -p.lambda * p.plane.depth / p.plane.normal.dot(ctx.k.ray(Vector2d(px.u, px.v)));
      if (z > 0 && std::isfinite(z)) depth(px) = static_cast<float>(z);
    }
  }
  return depth;
}

enum class AlignMode { Median, LeastSquares };

struct ScaleAlignment {
  double scale = 1.0;
  long used = 0;
  long excluded = 0;  // valid ground truth but non-positive/missing estimate
};

namespace detail {

inline bool gt_valid(float z) { return std::isfinite(z) && z > 0; }
inline bool est_valid(float z) { return std::isfinite(z) && z > 0; }

inline void check_same_size(const DepthMap& a, const DepthMap& b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw InputError("depth maps differ in size: " + std::to_string(a.width()) + "x" +
                     std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                     std::to_string(b.height()));
}

}  // namespace detail

/// Global factor s so that s * z_est best matches z_gt: median of ratios
/// by default, least squares on request.
inline ScaleAlignment align_scale(const DepthMap& est, const DepthMap& gt,
                                  AlignMode mode = AlignMode::Median) {
  detail::check_same_size(est, gt);
  ScaleAlignment out;
  std::vector<double> ratios;
  double num = 0, den = 0;
  for (std::size_t i = 0; i < gt.data().size(); ++i) {
    const float zg = gt.data()[i], ze = est.data()[i];
    if (!detail::gt_valid(zg)) continue;
    if (!detail::est_valid(ze)) {
      ++out.excluded;
      continue;
    }
    ratios.push_back(double(zg) / double(ze));
    num += double(zg) * double(ze);
    den += double(ze) * double(ze);
  }
  out.used = static_cast<long>(ratios.size());
  if (ratios.empty()) throw InputError("align_scale: no pixel with valid depth in both maps");
  if (mode == AlignMode::LeastSquares) {
    out.scale = num / den;
  } else {
    const std::size_t mid = ratios.size() / 2;
    std::nth_element(ratios.begin(), ratios.begin() + mid, ratios.end());
    out.scale = ratios[mid];
    if (ratios.size() % 2 == 0) {
      const double lower = *std::max_element(ratios.begin(), ratios.begin() + mid);
      out.scale = 0.5 * (out.scale + lower);
    }
  }
  return out;
}

struct SuperpixelError {
  int id = 0;
  double mre = 0.0;
  long pixels = 0;
};

struct MreReport {
  double mre = 0.0;
  long pixels = 0;    // P
  long excluded = 0;  // valid ground truth without a usable estimate
  double global_scale = 1.0;
  std::vector<SuperpixelError> per_sp;
};

/// Mean relative error of scale * est against gt over pixels where both are
/// valid. With `labels`, also broken down per superpixel.
inline MreReport mre(const DepthMap& est, const DepthMap& gt, double scale,
                     const LabelMap* labels = nullptr) {
  detail::check_same_size(est, gt);
  MreReport rep;
  rep.global_scale = scale;
  double sum = 0;
  std::vector<double> sp_sum;
  std::vector<long> sp_n;
  for (int v = 0; v < gt.height(); ++v)
    for (int u = 0; u < gt.width(); ++u) {
      const float zg = gt(u, v), ze = est(u, v);
      if (!detail::gt_valid(zg)) continue;
      if (!detail::est_valid(ze)) {
        ++rep.excluded;
        continue;
      }
      const double err = std::abs(double(zg) - scale * double(ze)) / double(zg);
      sum += err;
      ++rep.pixels;
      if (labels) {
        const int id = (*labels)(u, v);
        if (id >= static_cast<int>(sp_sum.size())) {
          sp_sum.resize(id + 1, 0.0);
          sp_n.resize(id + 1, 0);
        }
        sp_sum[id] += err;
        ++sp_n[id];
      }
    }
  if (rep.pixels == 0) throw InputError("mre: no pixel with valid depth in both maps");
  rep.mre = sum / double(rep.pixels);
  for (std::size_t i = 0; i < sp_sum.size(); ++i)
    if (sp_n[i] > 0) rep.per_sp.push_back({int(i), sp_sum[i] / double(sp_n[i]), sp_n[i]});
  return rep;
}

/// Aligns, then scores.
inline MreReport evaluate_depth(const DepthMap& est, const DepthMap& gt,
                                const LabelMap* labels = nullptr,
                                AlignMode mode = AlignMode::Median) {
  return mre(est, gt, align_scale(est, gt, mode).scale, labels);
}

inline nlohmann::json to_json(const MreReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : r.per_sp) per.push_back({{"id", s.id}, {"mre", s.mre}, {"pixels", s.pixels}});
  return {{"mre", r.mre},
          {"P", r.pixels},
          {"excluded", r.excluded},
          {"global_scale", r.global_scale},
          {"per_sp", per}};
}

/// One colored 3D point per reference pixel with a valid depth.
inline std::vector<ColoredPoint> point_cloud(const SceneContext& ctx, const SceneState& state,
                                             const ColorImage& image) {
  const DepthMap depth = depth_from_state(ctx, state);
  std::vector<ColoredPoint> pts;
  for (int v = 0; v < ctx.height; ++v)
    for (int u = 0; u < ctx.width; ++u) {
      if (!std::isfinite(depth(u, v))) continue;
      const Vector3d x = double(depth(u, v)) * ctx.k.ray(Vector2d(u, v));
      ColoredPoint p;
      p.xyz = x.cast<float>();
      for (int c = 0; c < 3; ++c) p.rgb[c] = detail::to_byte(image(u, v)[c]);
      pts.push_back(p);
    }
  return pts;
}

inline void export_pointcloud(const SceneContext& ctx, const SceneState& state,
                              const ColorImage& image, const std::filesystem::path& path) {
  write_ply(point_cloud(ctx, state, image), path);
}

inline void export_depth_pfm(const SceneContext& ctx, const SceneState& state,
                             const std::filesystem::path& path) {
  write_pfm(depth_from_state(ctx, state), path);
}

}  // namespace sps
