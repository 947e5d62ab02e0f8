#pragma once

// SLIC superpixels: k-means in (CIELAB, x, y) restricted to a 2S window
// around each center, followed by a connectivity pass that merges orphan
// fragments into an adjacent segment.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sps/errors.hpp"
#include "sps/image.hpp"

namespace sps {

namespace detail {

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline Eigen::Vector3d rgb_to_lab(const Rgb& rgb) {
  const double r = srgb_to_linear(rgb(0)), g = srgb_to_linear(rgb(1)),
               b = srgb_to_linear(rgb(2));
  // D65 white.
  const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
  const double y = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b);
  const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
  auto f = [](double t) {
    return t > 216.0 / 24389.0 ? std::cbrt(t) : (24389.0 / 27.0 * t + 16.0) / 116.0;
  };
  const double fx = f(x), fy = f(y), fz = f(z);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

struct SlicCenter {
  Eigen::Vector3d lab;
  double u = 0.0;
  double v = 0.0;
};

}  // namespace detail

/// Relabels a label map so that every 4-connected component gets its own
/// contiguous id (scan order). Returns the component count.
inline int relabel_connected(LabelMap& labels) {
  const int w = labels.width(), h = labels.height();
  LabelMap out(w, h, -1);
  int next = 0;
  std::vector<PixelCoord> stack;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      if (out(u, v) >= 0) continue;
      const int src = labels(u, v);
      out(u, v) = next;
      stack.assign(1, {u, v});
      while (!stack.empty()) {
        const PixelCoord p = stack.back();
        stack.pop_back();
        const PixelCoord nb[4] = {{p.u - 1, p.v}, {p.u + 1, p.v}, {p.u, p.v - 1}, {p.u, p.v + 1}};
        for (const auto& q : nb)
          if (labels.contains(q.u, q.v) && out(q) < 0 && labels(q) == src) {
            out(q) = next;
            stack.push_back(q);
          }
      }
      ++next;
    }
  labels = std::move(out);
  return next;
}

/// Segments `image` into roughly `n_target` compact, 4-connected regions.
/// Deterministic: no random initialization is involved.
inline LabelMap slic_segment(const ColorImage& image, int n_target,
                             double compactness = 10.0, int iterations = 10) {
  const int w = image.width(), h = image.height();
  const long npix = static_cast<long>(w) * h;
  if (n_target < 1) throw InputError("slic: n_target must be >= 1");
  if (n_target > npix) throw InputError("slic: n_target exceeds pixel count");
  if (!(compactness > 0.0)) throw InputError("slic: compactness must be positive");

  Grid<Eigen::Vector3d> lab(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) lab(u, v) = detail::rgb_to_lab(image(u, v));

  // Grid of seeds: nx * ny closest to n_target, then the most square cells,
  // then more columns.
  int nx = 1, ny = 1;
  {
    double best_aspect = std::numeric_limits<double>::infinity();
    long best_gap = std::numeric_limits<long>::max();
    for (int cx = 1; cx <= std::min(n_target, w); ++cx) {
      const int cy = std::clamp(static_cast<int>(std::lround(double(n_target) / cx)), 1, h);
      const long gap = std::abs(static_cast<long>(cx) * cy - n_target);
      const double aspect = std::abs(std::log((double(w) / cx) / (double(h) / cy)));
      if (gap < best_gap || (gap == best_gap && aspect <= best_aspect + 1e-12)) {
        best_gap = gap;
        best_aspect = aspect;
        nx = cx;
        ny = cy;
      }
    }
  }
  const double step_x = double(w) / nx, step_y = double(h) / ny;
  const double s = std::sqrt(double(npix) / n_target);

  auto gradient = [&](int u, int v) {
    const int u0 = std::max(u - 1, 0), u1 = std::min(u + 1, w - 1);
    const int v0 = std::max(v - 1, 0), v1 = std::min(v + 1, h - 1);
    return (lab(u1, v) - lab(u0, v)).squaredNorm() + (lab(u, v1) - lab(u, v0)).squaredNorm();
  };

  std::vector<detail::SlicCenter> centers;
  centers.reserve(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      int cu = std::min(static_cast<int>((i + 0.5) * step_x), w - 1);
      int cv = std::min(static_cast<int>((j + 0.5) * step_y), h - 1);
      // Move the seed off edges: lowest gradient in its 3x3 neighbourhood.
      if (w >= 3 && h >= 3 && n_target > 1) {
        int bu = cu, bv = cv;
        double best = gradient(cu, cv);
        for (int dv = -1; dv <= 1; ++dv)
          for (int du = -1; du <= 1; ++du) {
            const int qu = cu + du, qv = cv + dv;
            if (!image.contains(qu, qv)) continue;
            const double g = gradient(qu, qv);
            if (g < best) {
              best = g;
              bu = qu;
              bv = qv;
            }
          }
        cu = bu;
        cv = bv;
      }
      centers.push_back({lab(cu, cv), double(cu), double(cv)});
    }

  const double spatial_weight = (compactness / s) * (compactness / s);
  const int radius = static_cast<int>(std::ceil(std::max(step_x, step_y)));
  LabelMap labels(w, h, 0);
  Grid<double> dist(w, h, std::numeric_limits<double>::infinity());

  for (int it = 0; it < iterations; ++it) {
    std::fill(dist.data().begin(), dist.data().end(), std::numeric_limits<double>::infinity());
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const auto& ctr = centers[c];
      const int u0 = std::max(0, static_cast<int>(ctr.u) - radius);
      const int u1 = std::min(w - 1, static_cast<int>(ctr.u) + radius);
      const int v0 = std::max(0, static_cast<int>(ctr.v) - radius);
      const int v1 = std::min(h - 1, static_cast<int>(ctr.v) + radius);
      for (int v = v0; v <= v1; ++v)
        for (int u = u0; u <= u1; ++u) {
          const double dc = (lab(u, v) - ctr.lab).squaredNorm();
          const double ds = (u - ctr.u) * (u - ctr.u) + (v - ctr.v) * (v - ctr.v);
          const double d = dc + ds * spatial_weight;
          if (d < dist(u, v)) {
            dist(u, v) = d;
            labels(u, v) = static_cast<int>(c);
          }
        }
    }
    std::vector<detail::SlicCenter> acc(centers.size(), {Eigen::Vector3d::Zero(), 0.0, 0.0});
    std::vector<long> count(centers.size(), 0);
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        const int c = labels(u, v);
        acc[c].lab += lab(u, v);
        acc[c].u += u;
        acc[c].v += v;
        ++count[c];
      }
    for (std::size_t c = 0; c < centers.size(); ++c)
      if (count[c] > 0) {
        centers[c] = {acc[c].lab / double(count[c]), acc[c].u / count[c], acc[c].v / count[c]};
      }
  }

  // Connectivity: walk 4-connected components in scan order; components
  // smaller than a quarter of the nominal size join an adjacent component
  // that was already finalized.
  const long min_size = std::max(1L, npix / (4L * n_target));
  LabelMap out(w, h, -1);
  int next = 0;
  std::vector<PixelCoord> comp;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      if (out(u, v) >= 0) continue;
      const int src = labels(u, v);
      comp.assign(1, {u, v});
      out(u, v) = next;
      int adjacent = -1;
      for (std::size_t head = 0; head < comp.size(); ++head) {
        const PixelCoord p = comp[head];
        const PixelCoord nb[4] = {{p.u - 1, p.v}, {p.u + 1, p.v}, {p.u, p.v - 1}, {p.u, p.v + 1}};
        for (const auto& q : nb) {
          if (!labels.contains(q.u, q.v)) continue;
          if (out(q) < 0 && labels(q) == src) {
            out(q) = next;
            comp.push_back(q);
          } else if (adjacent < 0 && out(q) >= 0 && out(q) != next) {
            adjacent = out(q);
          }
        }
      }
      if (static_cast<long>(comp.size()) < min_size && adjacent >= 0) {
        for (const auto& p : comp) out(p) = adjacent;
      } else {
        ++next;
      }
    }
  labels = std::move(out);
  return labels;
}

}  // namespace sps
