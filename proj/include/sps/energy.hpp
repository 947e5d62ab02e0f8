#pragma once

// The three energy terms over a piecewise-planar scene state:
//   E_arap: motion smoothness + anchor-distance preservation over K-NN edges,
//   E_proj: per-patch mean flow transfer error of the plane homography,
//   E_cont: 3D gap between neighbouring planes along shared borders,
// and their weighted sum. Per-edge/per-patch pieces are exposed so the
// refinement MRF decomposes the total exactly.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "sps/errors.hpp"
#include "sps/geometry.hpp"
#include "sps/image.hpp"
#include "sps/local_sfm.hpp"
#include "sps/scene_graph.hpp"

namespace sps {

struct EnergyParams {
  double beta = 3.0;
  double sigma = 15.0;  // truncation of the next-frame border gap
  double alpha1 = 1.0;
  double alpha2 = 0.1;
  int knn_k = 15;
  // Weight on the translation block of ||M_i - M_k||_F; 1 keeps the plain
  // Frobenius norm of the homogeneous matrices.
  double translation_balance = 1.0;

  void validate() const {
    if (!(beta > 0)) throw InputError("beta must be positive");
    if (!(sigma > 0)) throw InputError("sigma must be positive");
    if (!(alpha1 >= 0) || !(alpha2 >= 0)) throw InputError("alpha1 and alpha2 must be >= 0");
    if (knn_k < 1) throw InputError("K must be >= 1");
    if (!(translation_balance > 0)) throw InputError("translation_balance must be positive");
  }
};

/// Variable part of one patch: unit-gauge plane, motion direction, scale.
struct PatchState {
  Plane plane;
  Rotation rotation;
  Vector3d t_dir = Vector3d::Zero();
  double lambda = 1.0;

  RigidMotion motion() const { return {rotation, t_dir, lambda}; }
  /// Point on the lambda-scaled plane along `ray` (z = 1 ray).
  Vector3d point(const Vector3d& ray) const {
    return (-lambda * plane.depth / plane.normal.dot(ray)) * ray;
  }
  Vector3d moved(const Vector3d& x) const { return rotation * x + lambda * t_dir; }
};

struct SceneState {
  std::vector<PatchState> patches;
};

/// Fixed per-scene data the energies are evaluated against.
struct SceneContext {
  struct Border {
    int a = 0;  // a < b
    int b = 0;
    std::vector<Vector3d> rays;  // through the midpoint of each pixel pair
    std::vector<double> w4;      // color weight of the pair
  };

  Intrinsics k;
  int width = 0;
  int height = 0;
  std::vector<Superpixel> superpixels;
  KnnGraph knn;
  std::vector<Vector3d> anchor_rays;
  std::vector<std::vector<Correspondence>> correspondences;  // valid flow only
  std::vector<Border> borders;
  std::vector<std::vector<int>> borders_of;  // border indices touching a patch
  std::vector<bool> is_static;               // excluded from the distance term

  int size() const { return static_cast<int>(superpixels.size()); }
  double diagonal() const { return std::hypot(double(width), double(height)); }
};

inline SceneContext build_scene_context(const Intrinsics& k, const ColorImage& image,
                                        std::vector<Superpixel> superpixels, KnnGraph knn,
                                        const std::vector<BoundaryPair>& boundary_pairs,
                                        std::vector<std::vector<Correspondence>> correspondences,
                                        double beta) {
  SceneContext ctx;
  ctx.k = k;
  ctx.width = image.width();
  ctx.height = image.height();
  ctx.superpixels = std::move(superpixels);
  ctx.knn = std::move(knn);
  ctx.correspondences = std::move(correspondences);
  const int n = ctx.size();
  if (static_cast<int>(ctx.correspondences.size()) != n)
    throw InputError("scene context: one correspondence list per superpixel required");
  if (!ctx.knn.empty() && static_cast<int>(ctx.knn.size()) != n)
    throw InputError("scene context: K-NN graph size mismatch");
  ctx.is_static.assign(n, false);
  for (const auto& sp : ctx.superpixels) ctx.anchor_rays.push_back(k.ray(sp.anchor_px()));

  std::map<std::pair<int, int>, int> index;
  ctx.borders_of.assign(n, {});
  for (const auto& bp : boundary_pairs) {
    if (bp.sp_a > bp.sp_b) continue;  // each physical pair once
    auto [it, fresh] = index.try_emplace({bp.sp_a, bp.sp_b}, static_cast<int>(ctx.borders.size()));
    if (fresh) {
      ctx.borders.push_back({bp.sp_a, bp.sp_b, {}, {}});
      ctx.borders_of[bp.sp_a].push_back(it->second);
      ctx.borders_of[bp.sp_b].push_back(it->second);
    }
    auto& border = ctx.borders[it->second];
    border.rays.push_back(k.ray(bp.midpoint()));
    const double dc = (image(bp.px_a) - image(bp.px_b)).cast<double>().norm();
    border.w4.push_back(std::exp(-beta * dc));
  }
  return ctx;
}

/// exp(-beta * anchor distance / image diagonal).
inline double weight_arap(const Vector2d& anchor_i, const Vector2d& anchor_k, double beta,
                          double diagonal) {
  return std::exp(-beta * (anchor_i - anchor_k).norm() / diagonal);
}

inline double motion_distance(const PatchState& a, const PatchState& b, double balance = 1.0) {
  const double rot = (a.rotation.matrix() - b.rotation.matrix()).squaredNorm();
  const double trans = (a.lambda * a.t_dir - b.lambda * b.t_dir).squaredNorm();
  return std::sqrt(rot + balance * balance * trans);
}

/// Contribution of the directed K-NN edge i -> k.
inline double arap_edge(const SceneContext& ctx, const EnergyParams& prm, int i, int k,
                        const PatchState& si, const PatchState& sk) {
  const double w = weight_arap(ctx.superpixels[i].anchor_px(), ctx.superpixels[k].anchor_px(),
                               prm.beta, ctx.diagonal());
  double e = w * motion_distance(si, sk, prm.translation_balance);
  if (!ctx.is_static[i] && !ctx.is_static[k]) {
    const Vector3d xi = si.point(ctx.anchor_rays[i]), xk = sk.point(ctx.anchor_rays[k]);
    e += w * std::abs((xi - xk).norm() - (si.moved(xi) - sk.moved(xk)).norm());
  }
  return e;
}

/// Mean flow transfer error of patch i's plane homography (lambda cancels).
inline double proj_patch(const SceneContext& ctx, int i, const PatchState& s) {
  const auto& pairs = ctx.correspondences[i];
  if (pairs.empty()) return 0.0;
  const Matrix3d h = ctx.k.matrix() *
                     (s.rotation.matrix() - s.t_dir * s.plane.normal.transpose() / s.plane.depth) *
                     ctx.k.inverse();
  double sum = 0.0;
  for (const auto& c : pairs) sum += ((h * c.x.homogeneous()).hnormalized() - c.xp).norm();
  return sum / double(pairs.size());
}

/// Contribution of one border (both orientations of every pixel pair).
inline double cont_border(const SceneContext& ctx, const EnergyParams& prm, int border,
                          const PatchState& sa, const PatchState& sb) {
  const auto& b = ctx.borders[border];
  double e = 0.0;
  for (std::size_t j = 0; j < b.rays.size(); ++j) {
    const Vector3d xa = sa.point(b.rays[j]), xb = sb.point(b.rays[j]);
    const double gap1 = (xa - xb).norm();
    const double gap2 = (sa.moved(xa) - sb.moved(xb)).norm();
    e += b.w4[j] * (gap1 + std::min(gap2, prm.sigma));
  }
  return 2.0 * e;
}

inline double e_arap(const SceneContext& ctx, const SceneState& st, const EnergyParams& prm) {
  double e = 0.0;
  for (int i = 0; i < ctx.size(); ++i)
    for (int k : ctx.knn[i]) e += arap_edge(ctx, prm, i, k, st.patches[i], st.patches[k]);
  return e;
}

inline double e_proj(const SceneContext& ctx, const SceneState& st) {
  double e = 0.0;
  for (int i = 0; i < ctx.size(); ++i) e += proj_patch(ctx, i, st.patches[i]);
  return e;
}

inline double e_cont(const SceneContext& ctx, const SceneState& st, const EnergyParams& prm) {
  double e = 0.0;
  for (int b = 0; b < static_cast<int>(ctx.borders.size()); ++b)
    e += cont_border(ctx, prm, b, st.patches[ctx.borders[b].a], st.patches[ctx.borders[b].b]);
  return e;
}

struct EnergyBreakdown {
  double arap = 0.0;
  double proj = 0.0;
  double cont = 0.0;
  double total = 0.0;
};

inline EnergyBreakdown e_total(const SceneContext& ctx, const SceneState& st,
                               const EnergyParams& prm) {
  EnergyBreakdown out;
  out.arap = e_arap(ctx, st, prm);
  out.proj = e_proj(ctx, st);
  out.cont = e_cont(ctx, st, prm);
  out.total = out.arap + prm.alpha1 * out.proj + prm.alpha2 * out.cont;
  return out;
}

/// Unit-scale state (lambda = 1/N) from reconstructed patches.
inline SceneState initial_state(const std::vector<PlanarPatch>& patches) {
  SceneState st;
  const double lambda = patches.empty() ? 1.0 : 1.0 / double(patches.size());
  for (const auto& p : patches) st.patches.push_back({p.plane, p.rotation, p.t_dir, lambda});
  return st;
}

}  // namespace sps
