#pragma once

// Random small scenes and independent evaluators of the three energy terms.

#include <cmath>
#include <map>
#include <random>

#include "sps/energy.hpp"
#include "test_util.hpp"

namespace oracle {

using namespace sps;


struct RandomScene {
  ColorImage image;
  LabelMap labels;
  SceneContext ctx;
  SceneState state;
  EnergyParams prm;
};

Intrinsics small_k() {
  Intrinsics k;
  k.fx = k.fy = 40.0;
  k.cx = 16.0;
  k.cy = 12.0;
  return k;
}

// Voronoi labelling of a 32x24 image into n cells, random colors, random
// per-patch states and random correspondences.
RandomScene random_scene(std::mt19937& rng, int n) {
  const int w = 32, h = 24;
  std::uniform_real_distribution<double> ux(0, w), uy(0, h), unit(0, 1), sgn(-1, 1);
  RandomScene s;
  s.image = ColorImage(w, h);
  s.labels = LabelMap(w, h);
  std::vector<Vector2d> seeds(n);
  for (auto& p : seeds) p = {ux(rng), uy(rng)};
  std::vector<Rgb> colors(n);
  for (auto& c : colors) c = Rgb(unit(rng), unit(rng), unit(rng));
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      int best = 0;
      for (int i = 1; i < n; ++i)
        if ((seeds[i] - Vector2d(u, v)).norm() < (seeds[best] - Vector2d(u, v)).norm()) best = i;
      s.labels(u, v) = best;
      s.image(u, v) = colors[best] + Rgb(0.05f * float(sgn(rng)), 0.0f, 0.0f);
    }
  // Drop empty cells by relabelling densely.
  std::map<int, int> dense;
  for (auto& id : s.labels.data()) id = dense.try_emplace(id, int(dense.size())).first->second;
  n = int(dense.size());

  auto sps = build_superpixels(s.labels, s.image);
  std::vector<Vector3d> anchors;
  for (const auto& sp : sps) anchors.push_back(Vector3d(sp.anchor.u, sp.anchor.v, 0.0));
  const int k = n > 1 ? std::uniform_int_distribution<int>(1, n - 1)(rng) : 1;
  KnnGraph knn = n > 1 ? build_knn_graph(anchors, k) : KnnGraph(1);
  std::vector<std::vector<Correspondence>> corr(n);
  for (int i = 0; i < n; ++i)
    for (const auto& px : sps[i].pixels)
      if (unit(rng) < 0.7)
        corr[i].push_back({Vector2d(px.u, px.v), Vector2d(px.u + 3 * sgn(rng), px.v + 3 * sgn(rng))});

  s.prm.beta = 1.0 + 4.0 * unit(rng);
  s.prm.sigma = 0.05 + unit(rng);  // small enough that the cap engages sometimes
  s.ctx = build_scene_context(small_k(), s.image, sps, knn, boundary_adjacency(sps), corr,
                              s.prm.beta);
  for (int i = 0; i < n; ++i) {
    auto [r, t, plane] = testutil::random_motion_plane(rng);
    s.state.patches.push_back({plane, r, t.normalized(), 0.05 + unit(rng)});
    s.ctx.is_static[i] = unit(rng) < 0.15;
  }
  return s;
}

// Brute-force evaluators: pixel scans, explicit 3D transfer, no library
// energy helpers.

Matrix4d motion_matrix(const PatchState& p) {
  Matrix4d m = Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = p.rotation.matrix();
  m.topRightCorner<3, 1>() = p.lambda * p.t_dir;
  return m;
}

Vector3d on_plane(const Intrinsics& k, const Vector2d& px, const PatchState& p) {
  return testutil::ray_plane(k, px, p.plane.normal, p.lambda * p.plane.depth);
}

Vector3d move(const PatchState& p, const Vector3d& x) {
  return (motion_matrix(p) * x.homogeneous()).head<3>();
}

double brute_arap(const RandomScene& s) {
  const auto& sps = s.ctx.superpixels;
  const Intrinsics k = s.ctx.k;
  const double diag = std::sqrt(double(s.image.width() * s.image.width() +
                                       s.image.height() * s.image.height()));
  double e = 0;
  for (std::size_t i = 0; i < sps.size(); ++i)
    for (int j : s.ctx.knn[i]) {
      const Vector2d ai(sps[i].anchor.u, sps[i].anchor.v), aj(sps[j].anchor.u, sps[j].anchor.v);
      const double w = std::exp(-s.prm.beta * (ai - aj).norm() / diag);
      const auto &pi = s.state.patches[i], &pj = s.state.patches[j];
      e += w * (motion_matrix(pi) - motion_matrix(pj)).norm();
      if (s.ctx.is_static[i] || s.ctx.is_static[j]) continue;
      const Vector3d xi = on_plane(k, ai, pi), xj = on_plane(k, aj, pj);
      e += w * std::abs((xi - xj).norm() - (move(pi, xi) - move(pj, xj)).norm());
    }
  return e;
}

double brute_proj(const RandomScene& s) {
  double e = 0;
  for (int i = 0; i < s.ctx.size(); ++i) {
    const auto& pairs = s.ctx.correspondences[i];
    if (pairs.empty()) continue;
    double sum = 0;
    for (const auto& c : pairs) {
      const Vector3d x2 = move(s.state.patches[i], on_plane(s.ctx.k, c.x, s.state.patches[i]));
      const Vector2d proj(s.ctx.k.fx * x2.x() / x2.z() + s.ctx.k.cx,
                          s.ctx.k.fy * x2.y() / x2.z() + s.ctx.k.cy);
      sum += (proj - c.xp).norm();
    }
    e += sum / double(pairs.size());
  }
  return e;
}

double brute_cont(const RandomScene& s) {
  double e = 0;
  const int w = s.labels.width(), h = s.labels.height();
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const int du[4] = {1, -1, 0, 0}, dv[4] = {0, 0, 1, -1};
      for (int d = 0; d < 4; ++d) {
        const int u2 = u + du[d], v2 = v + dv[d];
        if (u2 < 0 || v2 < 0 || u2 >= w || v2 >= h) continue;
        const int i = s.labels(u, v), j = s.labels(u2, v2);
        if (i == j) continue;
        const Vector2d mid(0.5 * (u + u2), 0.5 * (v + v2));
        const auto &pi = s.state.patches[i], &pj = s.state.patches[j];
        const Vector3d xi = on_plane(s.ctx.k, mid, pi), xj = on_plane(s.ctx.k, mid, pj);
        const double w4 =
            std::exp(-s.prm.beta * (s.image(u, v) - s.image(u2, v2)).cast<double>().norm());
        e += w4 * ((xi - xj).norm() + std::min((move(pi, xi) - move(pj, xj)).norm(), s.prm.sigma));
      }
    }
  return e;
}

}  // namespace oracle
