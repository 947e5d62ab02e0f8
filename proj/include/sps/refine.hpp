#pragma once

// Joint refinement of planes and motions with scales frozen: max-product
// particle belief propagation. Each patch gets a particle set (its current
// state first, then perturbations and neighbour-derived proposals); the
// discrete MRF over particles has unary alpha1 * E_proj of the patch and
// pairwise E_arap edge + alpha2 * E_cont border terms, so its energy equals
// e_total exactly. TRW-S picks one particle per patch, starting from the
// incumbent labeling, which makes the total energy non-increasing.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "sps/energy.hpp"
#include "sps/local_sfm.hpp"
#include "sps/trws.hpp"

namespace sps {

struct RefineOptions {
  int iterations = 8;
  int particles = 50;
  std::uint64_t seed = 0;
  double sigma_normal_deg = 5.0;
  double sigma_log_depth = 0.05;
  double sigma_rotation_deg = 1.0;
  double sigma_translation_deg = 2.0;
  bool neighbour_proposals = true;
  int max_neighbour_sources = 8;
  int trws_iterations = 30;
};

struct RefineResult {
  std::vector<double> energy_history;  // e_total before the first and after each iteration
  std::vector<int> changed;            // patches whose state changed per iteration
  int iterations = 0;
};

namespace detail {

inline Vector3d perturb_direction(const Vector3d& v, double sigma_rad, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector3d axis(g(rng), g(rng), g(rng));
  axis -= axis.dot(v) * v;  // rotate about an axis orthogonal to v
  if (axis.norm() < 1e-12) return v;
  return (Rotation::axis_angle(axis, sigma_rad * g(rng)) * v).normalized();
}

// A patch state must put every own pixel, its anchor and its border
// midpoints strictly in front of the camera.
inline bool plane_covers(const Plane& plane, const std::vector<Vector3d>& rays) {
  for (const auto& r : rays)
    if (!(plane.normal.dot(r) < -1e-9)) return false;
  return true;
}

// Cached geometry of one particle.
struct ParticleCache {
  Vector3d anchor, anchor_moved;
  std::vector<std::vector<Vector3d>> border_pts, border_moved;  // per borders_of slot
};

}  // namespace detail

/// Runs up to `opt.iterations` rounds of particle proposal + TRW-S over the
/// scene, updating `state` in place. Scales (lambda) are left unchanged.
inline RefineResult refine(const SceneContext& ctx, SceneState& state, const EnergyParams& prm,
                           const RefineOptions& opt = {}) {
  const int n = ctx.size();
  if (static_cast<int>(state.patches.size()) != n)
    throw InputError("refine: state and context sizes differ");
  if (opt.particles < 1) throw InputError("refine: need at least one particle");
  RefineResult result;
  result.energy_history.push_back(e_total(ctx, state, prm).total);

  // Undirected neighbour pairs (K-NN either way, or a shared border).
  std::map<std::pair<int, int>, int> pair_index;
  std::vector<std::pair<int, int>> pairs;
  auto add_pair = [&](int a, int b) {
    if (a == b) return;
    const auto key = std::minmax(a, b);
    if (pair_index.try_emplace({key.first, key.second}, int(pairs.size())).second)
      pairs.push_back({key.first, key.second});
  };
  for (int i = 0; i < n; ++i)
    for (int k : ctx.knn[i]) add_pair(i, k);
  for (const auto& b : ctx.borders) add_pair(b.a, b.b);
  std::vector<std::vector<int>> pair_borders(pairs.size());
  for (int b = 0; b < static_cast<int>(ctx.borders.size()); ++b)
    pair_borders[pair_index.at({ctx.borders[b].a, ctx.borders[b].b})].push_back(b);
  std::vector<std::vector<int>> neighbours(n);
  for (const auto& [a, b] : pairs) {
    neighbours[a].push_back(b);
    neighbours[b].push_back(a);
  }
  auto has_edge = [&](int i, int k) {
    return std::find(ctx.knn[i].begin(), ctx.knn[i].end(), k) != ctx.knn[i].end();
  };

  // Rays a particle's plane must cover.
  std::vector<std::vector<Vector3d>> cover(n);
  for (int i = 0; i < n; ++i) {
    cover[i].push_back(ctx.anchor_rays[i]);
    for (const auto& px : ctx.superpixels[i].boundary) cover[i].push_back(ctx.k.ray(Vector2d(px.u, px.v)));
    for (int b : ctx.borders_of[i])
      for (const auto& r : ctx.borders[b].rays) cover[i].push_back(r);
  }

  const double deg = M_PI / 180.0;
  for (int iter = 0; iter < opt.iterations; ++iter) {
    // ---- proposals
    std::vector<std::vector<PatchState>> particles(n);
    for (int i = 0; i < n; ++i) {
      std::mt19937_64 rng(opt.seed * 0x9E3779B97F4A7C15ULL + std::uint64_t(iter) * 1000003ULL + i);
      const PatchState& cur = state.patches[i];
      auto& set = particles[i];
      set.push_back(cur);
      const bool moving = cur.t_dir.squaredNorm() > 0;
      auto try_add = [&](const PatchState& p) {
        if (static_cast<int>(set.size()) < opt.particles && detail::plane_covers(p.plane, cover[i]))
          set.push_back(p);
      };
      const auto& pairs_i = ctx.correspondences[i];
      // Plane refit for the current motion.
      if (moving)
        if (auto pl = fit_plane_given_motion(ctx.k, cur.rotation, cur.t_dir, pairs_i)) {
          PatchState p = cur;
          p.plane = *pl;
          try_add(p);
        }
      if (opt.neighbour_proposals) {
        std::vector<int> src = neighbours[i];
        std::shuffle(src.begin(), src.end(), rng);
        if (static_cast<int>(src.size()) > opt.max_neighbour_sources) src.resize(opt.max_neighbour_sources);
        for (int k : src) {
          const PatchState& nb = state.patches[k];
          // Neighbour's plane at this patch's scale.
          PatchState p = cur;
          p.plane = Plane(nb.plane.normal, nb.plane.depth * nb.lambda / cur.lambda);
          try_add(p);
          // Neighbour's motion, with the plane refit to the flow.
          if (moving && nb.t_dir.squaredNorm() > 0) {
            PatchState q = cur;
            q.rotation = nb.rotation;
            q.t_dir = nb.t_dir;
            if (auto pl = fit_plane_given_motion(ctx.k, q.rotation, q.t_dir, pairs_i)) q.plane = *pl;
            try_add(q);
          }
        }
      }
      std::normal_distribution<double> g(0.0, 1.0);
      for (int attempt = 0; static_cast<int>(set.size()) < opt.particles && attempt < 4 * opt.particles;
           ++attempt) {
        PatchState p = cur;
        p.plane = Plane(detail::perturb_direction(cur.plane.normal, opt.sigma_normal_deg * deg, rng),
                        cur.plane.depth * std::exp(opt.sigma_log_depth * g(rng)));
        if (attempt % 2 == 1) {  // joint perturbation of plane and motion
          p.rotation = Rotation::exp(Vector3d(g(rng), g(rng), g(rng)) * (opt.sigma_rotation_deg * deg)) *
                       cur.rotation;
          if (moving) p.t_dir = detail::perturb_direction(cur.t_dir, opt.sigma_translation_deg * deg, rng);
        }
        try_add(p);
      }
    }

    // ---- cached particle geometry
    std::vector<std::vector<detail::ParticleCache>> cache(n);
    for (int i = 0; i < n; ++i) {
      for (const auto& p : particles[i]) {
        detail::ParticleCache c;
        c.anchor = p.point(ctx.anchor_rays[i]);
        c.anchor_moved = p.moved(c.anchor);
        for (int b : ctx.borders_of[i]) {
          std::vector<Vector3d> pts, moved;
          for (const auto& r : ctx.borders[b].rays) {
            pts.push_back(p.point(r));
            moved.push_back(p.moved(pts.back()));
          }
          c.border_pts.push_back(std::move(pts));
          c.border_moved.push_back(std::move(moved));
        }
        cache[i].push_back(std::move(c));
      }
    }
    auto slot = [&](int i, int b) {
      const auto& v = ctx.borders_of[i];
      return int(std::find(v.begin(), v.end(), b) - v.begin());
    };

    // ---- MRF
    PairwiseMrf mrf;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd u(particles[i].size());
      for (std::size_t a = 0; a < particles[i].size(); ++a)
        u[a] = prm.alpha1 * proj_patch(ctx, i, particles[i][a]);
      mrf.add_node(u);
    }
    const double diag = ctx.diagonal();
    for (std::size_t e = 0; e < pairs.size(); ++e) {
      const auto [i, k] = pairs[e];
      const bool ik = has_edge(i, k), ki = has_edge(k, i);
      const double w = weight_arap(ctx.superpixels[i].anchor_px(), ctx.superpixels[k].anchor_px(),
                                   prm.beta, diag);
      const double directed = double(ik) + double(ki);
      const bool distance_term = !ctx.is_static[i] && !ctx.is_static[k];
      Eigen::MatrixXd cost(particles[i].size(), particles[k].size());
      for (std::size_t a = 0; a < particles[i].size(); ++a)
        for (std::size_t b = 0; b < particles[k].size(); ++b) {
          const auto &pa = particles[i][a], &pb = particles[k][b];
          const auto &ca = cache[i][a], &cb = cache[k][b];
          double c = 0.0;
          if (directed > 0) {
            double arap = motion_distance(pa, pb, prm.translation_balance);
            if (distance_term)
              arap += std::abs((ca.anchor - cb.anchor).norm() - (ca.anchor_moved - cb.anchor_moved).norm());
            c += directed * w * arap;
          }
          for (int bd : pair_borders[e]) {
            const int sa = slot(i, bd), sb = slot(k, bd);
            const auto& w4 = ctx.borders[bd].w4;
            double s = 0.0;
            for (std::size_t j = 0; j < w4.size(); ++j) {
              const double gap1 = (ca.border_pts[sa][j] - cb.border_pts[sb][j]).norm();
              const double gap2 = (ca.border_moved[sa][j] - cb.border_moved[sb][j]).norm();
              s += w4[j] * (gap1 + std::min(gap2, prm.sigma));
            }
            c += prm.alpha2 * 2.0 * s;
          }
          cost(a, b) = c;
        }
      mrf.add_edge(i, k, cost);
    }

    TrwsOptions topt;
    topt.max_iterations = opt.trws_iterations;
    const auto sol = trws(mrf, topt, std::vector<int>(n, 0));
    int changed = 0;
    for (int i = 0; i < n; ++i)
      if (sol.labeling[i] != 0) {
        state.patches[i] = particles[i][sol.labeling[i]];
        ++changed;
      }
    // Recompute from scratch rather than trusting the MRF sum.
    result.energy_history.push_back(e_total(ctx, state, prm).total);
    result.changed.push_back(changed);
    ++result.iterations;
  }
  return result;
}

}  // namespace sps
