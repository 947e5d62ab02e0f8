#pragma once

// Per-superpixel rigid reconstruction from flow: robust homography fit,
// decomposition, and a unit-scale planar patch (|t| = 1).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "sps/errors.hpp"
#include "sps/geometry.hpp"
#include "sps/image.hpp"
#include "sps/scene_graph.hpp"
#include "sps/trws.hpp"

namespace sps {

struct Correspondence {
  Vector2d x;   // reference pixel
  Vector2d xp;  // x + flow(x)
};

/// x' = x + flow(x) over the superpixel's pixels with valid flow.
inline std::vector<Correspondence> flow_correspondences(const FlowField& flow,
                                                        const Superpixel& sp,
                                                        double min_valid_fraction = 0.5) {
  std::vector<Correspondence> out;
  out.reserve(sp.pixels.size());
  for (const auto& p : sp.pixels) {
    if (!flow.valid(p.u, p.v)) continue;
    const Vector2d x(p.u, p.v);
    out.push_back({x, x + Vector2d(flow.du(p.u, p.v), flow.dv(p.u, p.v))});
  }
  if (out.empty() || double(out.size()) < min_valid_fraction * double(sp.pixels.size()))
    throw DegenerateGeometryError("superpixel " + std::to_string(sp.id) +
                                  ": too few pixels with valid flow");
  return out;
}

struct HomographyFitOptions {
  double ransac_threshold = 1.5;  // px, symmetric transfer error
  int ransac_iterations = 200;
  int ransac_min_pairs = 21;      // RANSAC only above 20 pairs
  int refine_steps = 5;
  double max_condition = 1e10;
  std::uint64_t seed = 0;
};

struct HomographyFit {
  Homography h;
  std::vector<int> inliers;
  double residual = 0.0;  // mean forward transfer error over inliers, px
};

namespace detail {

/// Similarity moving the centroid to 0 and the mean distance to sqrt(2).
inline Matrix3d hartley_normalization(std::span<const Vector2d> pts) {
  Vector2d c = Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= double(pts.size());
  double mean = 0.0;
  for (const auto& p : pts) mean += (p - c).norm();
  mean /= double(pts.size());
  if (!(mean > 1e-12)) throw DegenerateGeometryError("homography fit: coincident points");
  const double s = std::sqrt(2.0) / mean;
  Matrix3d t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

inline Vector2d apply_h(const Matrix3d& h, const Vector2d& x) {
  const Vector3d y = h * x.homogeneous();
  return y.hnormalized();
}

inline Matrix3d dlt(std::span<const Correspondence> pairs, std::span<const int> idx,
                    double max_condition) {
  const int n = static_cast<int>(idx.size());
  if (n < 4) throw DegenerateGeometryError("homography fit: fewer than 4 correspondences");
  std::vector<Vector2d> a(n), b(n);
  for (int i = 0; i < n; ++i) {
    a[i] = pairs[idx[i]].x;
    b[i] = pairs[idx[i]].xp;
  }
  const Matrix3d ta = hartley_normalization(a), tb = hartley_normalization(b);
  Eigen::MatrixXd m(2 * n, 9);
  for (int i = 0; i < n; ++i) {
    const Vector3d p = ta * a[i].homogeneous();
    const Vector3d q = tb * b[i].homogeneous();
    m.row(2 * i) << 0, 0, 0, -q.z() * p.transpose(), q.y() * p.transpose();
    m.row(2 * i + 1) << q.z() * p.transpose(), 0, 0, 0, -q.x() * p.transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (!(sv(7) > 0.0) || sv(0) / sv(7) > max_condition)
    throw DegenerateGeometryError("homography fit: degenerate configuration");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return tb.inverse() * hn * ta;
}

inline double symmetric_error(const Matrix3d& h, const Matrix3d& h_inv, const Correspondence& c) {
  const double f = (apply_h(h, c.x) - c.xp).squaredNorm();
  const double b = (apply_h(h_inv, c.xp) - c.x).squaredNorm();
  return std::sqrt(0.5 * (f + b));
}

/// Gauss-Newton on the symmetric transfer error; a step is kept only if it
/// lowers the cost.
inline Matrix3d refine_symmetric(const Matrix3d& h0, std::span<const Correspondence> pairs,
                                 std::span<const int> idx, int steps) {
  const int n = static_cast<int>(idx.size());
  auto residuals = [&](const Matrix3d& h) {
    Eigen::VectorXd r(4 * n);
    const Matrix3d hi = h.inverse();
    for (int i = 0; i < n; ++i) {
      const auto& c = pairs[idx[i]];
      r.segment<2>(4 * i) = apply_h(h, c.x) - c.xp;
      r.segment<2>(4 * i + 2) = apply_h(hi, c.xp) - c.x;
    }
    return r;
  };
  Matrix3d h = h0 / h0.norm();
  Eigen::VectorXd r = residuals(h);
  double cost = r.squaredNorm();
  for (int it = 0; it < steps; ++it) {
    Eigen::MatrixXd jac(4 * n, 9);
    for (int k = 0; k < 9; ++k) {
      Matrix3d hp = h, hm = h;
      const double eps = 1e-7;
      hp(k / 3, k % 3) += eps;
      hm(k / 3, k % 3) -= eps;
      jac.col(k) = (residuals(hp) - residuals(hm)) / (2 * eps);
    }
    Eigen::Matrix<double, 9, 9> jtj = jac.transpose() * jac;
    const Eigen::Matrix<double, 9, 1> jtr = jac.transpose() * r;
    // Projective scale is a null direction; a tiny ridge keeps the system regular.
    jtj.diagonal().array() += 1e-9 * (jtj.trace() / 9.0 + 1e-30);
    const Eigen::Matrix<double, 9, 1> step = jtj.ldlt().solve(-jtr);
    Matrix3d cand = h;
    for (int k = 0; k < 9; ++k) cand(k / 3, k % 3) += step(k);
    cand /= cand.norm();
    if (!cand.allFinite() || std::abs(cand.determinant()) < 1e-300) break;
    const Eigen::VectorXd rc = residuals(cand);
    const double cc = rc.squaredNorm();
    if (!(cc < cost)) break;
    h = cand;
    r = rc;
    cost = cc;
  }
  return h;
}

}  // namespace detail

/// Normalized DLT, wrapped in RANSAC above `ransac_min_pairs - 1` pairs and
/// polished by Gauss-Newton on the symmetric transfer error.
inline HomographyFit fit_homography(std::span<const Correspondence> pairs,
                                    const HomographyFitOptions& opt = {}) {
  const int n = static_cast<int>(pairs.size());
  if (n < 4) throw DegenerateGeometryError("homography fit: fewer than 4 correspondences");
  std::vector<int> all(n);
  for (int i = 0; i < n; ++i) all[i] = i;

  std::vector<int> inliers = all;
  if (n >= opt.ransac_min_pairs) {
    std::mt19937_64 rng(opt.seed);
    std::uniform_int_distribution<int> pick(0, n - 1);
    long best_count = -1;
    double best_err = 0.0;
    std::vector<int> current;
    for (int it = 0; it < opt.ransac_iterations; ++it) {
      int sample[4];
      for (int k = 0; k < 4; ++k) {
        do {
          sample[k] = pick(rng);
        } while (std::find(sample, sample + k, sample[k]) != sample + k);
      }
      Matrix3d h;
      try {
        h = detail::dlt(pairs, std::span<const int>(sample, 4), opt.max_condition);
      } catch (const DegenerateGeometryError&) {
        continue;
      }
      if (!h.allFinite() || std::abs(h.determinant()) < 1e-300) continue;
      const Matrix3d hi = h.inverse();
      current.clear();
      double err = 0.0;
      for (int i = 0; i < n; ++i) {
        const double e = detail::symmetric_error(h, hi, pairs[i]);
        if (e < opt.ransac_threshold) {
          current.push_back(i);
          err += e;
        }
      }
      const long count = static_cast<long>(current.size());
      if (count > best_count || (count == best_count && err < best_err)) {
        best_count = count;
        best_err = err;
        inliers = current;
      }
      if (count == n) break;
    }
    if (best_count < 4) inliers = all;
  }

  Matrix3d h = detail::dlt(pairs, inliers, opt.max_condition);
  // Final inlier set from the least-squares model, then polish.
  if (n >= opt.ransac_min_pairs) {
    const Matrix3d hi = h.inverse();
    std::vector<int> refit;
    for (int i = 0; i < n; ++i)
      if (detail::symmetric_error(h, hi, pairs[i]) < opt.ransac_threshold) refit.push_back(i);
    if (refit.size() >= 4 && refit.size() != inliers.size()) {
      inliers = std::move(refit);
      h = detail::dlt(pairs, inliers, opt.max_condition);
    }
  }
  h = detail::refine_symmetric(h, pairs, inliers, opt.refine_steps);

  HomographyFit fit;
  fit.h = Homography::normalized(h);
  fit.inliers = std::move(inliers);
  double sum = 0.0;
  for (int i : fit.inliers) sum += (fit.h.apply(pairs[i].x) - pairs[i].xp).norm();
  fit.residual = sum / double(fit.inliers.size());
  return fit;
}

enum class PatchStatus { Reliable, Static, Unreliable };

/// One physically valid (plane, motion) interpretation at unit gauge.
struct PatchHypothesis {
  Plane plane;
  Rotation rotation;
  Vector3d t_dir = Vector3d::Zero();
  double residual = 0.0;
};

struct PlanarPatch {
  int sp_id = 0;
  Plane plane;                        // unit gauge: |t| = 1 (d = 1 when static)
  Rotation rotation;
  Vector3d t_dir = Vector3d::Zero();  // unit, or zero when static
  Vector3d anchor3d = Vector3d::Zero();
  std::vector<Vector3d> boundary3d;
  double residual = 0.0;
  double inlier_fraction = 1.0;  // RANSAC inliers / correspondences
  PatchStatus status = PatchStatus::Reliable;
  bool normal_undetermined = false;
  int proxy = -1;  // reliable patch whose plane (and scale) this one borrows
  std::vector<PatchHypothesis> hypotheses;
  int chosen = 0;
  Homography homography;

  bool reliable() const { return status == PatchStatus::Reliable; }
  bool translating() const { return t_dir.squaredNorm() > 0.0; }
  RigidMotion motion(double lambda) const { return {rotation, t_dir, lambda}; }
};

namespace detail {

inline std::vector<Vector2d> as_points(const std::vector<PixelCoord>& px) {
  std::vector<Vector2d> out;
  out.reserve(px.size());
  for (const auto& p : px) out.emplace_back(p.u, p.v);
  return out;
}

inline double mean_transfer(const Homography& h, std::span<const Correspondence> pairs,
                            std::span<const int> idx) {
  double sum = 0.0;
  for (int i : idx) sum += (h.apply(pairs[i].x) - pairs[i].xp).norm();
  return idx.empty() ? 0.0 : sum / double(idx.size());
}

}  // namespace detail

/// Recomputes the 3D anchor and boundary points from the patch's plane.
inline void update_patch_points(PlanarPatch& patch, const Superpixel& sp, const Intrinsics& k) {
  patch.anchor3d = backproject(k, sp.anchor_px(), patch.plane);
  patch.boundary3d.clear();
  patch.boundary3d.reserve(sp.boundary.size());
  for (const auto& p : sp.boundary)
    patch.boundary3d.push_back(backproject(k, Vector2d(p.u, p.v), patch.plane));
}

inline void select_hypothesis(PlanarPatch& patch, int index, const Superpixel& sp,
                              const Intrinsics& k) {
  const auto& hyp = patch.hypotheses.at(index);
  patch.chosen = index;
  patch.plane = hyp.plane;
  patch.rotation = hyp.rotation;
  patch.t_dir = hyp.t_dir;
  patch.residual = hyp.residual;
  update_patch_points(patch, sp, k);
}

/// Reconstructs one superpixel at unit gauge. Candidates that survive the
/// boundary-wide cheirality test are ranked by residual, then by index;
/// all survivors are kept as hypotheses for later disambiguation.
inline PlanarPatch reconstruct_patch(const Superpixel& sp, std::span<const Correspondence> pairs,
                                     const Intrinsics& k, const HomographyFitOptions& opt = {}) {
  PlanarPatch patch;
  patch.sp_id = sp.id;
  const HomographyFit fit = fit_homography(pairs, opt);
  patch.homography = fit.h;
  patch.residual = fit.residual;
  patch.inlier_fraction = pairs.empty() ? 0.0 : double(fit.inliers.size()) / double(pairs.size());

  std::vector<Vector2d> check = detail::as_points(sp.boundary);
  check.push_back(sp.anchor_px());
  const auto candidates = decompose_homography(fit.h, k, check);
  if (candidates.empty()) {
    patch.status = PatchStatus::Unreliable;
    return patch;
  }
  if (candidates.front().pure_rotation || candidates.front().ratio < 1e-12) {
    patch.status = PatchStatus::Static;
    patch.normal_undetermined = true;
    patch.rotation = candidates.front().rotation;
    patch.t_dir = Vector3d::Zero();
    patch.plane = Plane(Vector3d(0, 0, -1), 1.0);
    patch.hypotheses = {{patch.plane, patch.rotation, patch.t_dir, fit.residual}};
    update_patch_points(patch, sp, k);
    return patch;
  }

  for (const auto& c : candidates) {
    PatchHypothesis hyp;
    hyp.plane = Plane(c.normal, 1.0 / c.ratio);  // |t| = 1
    hyp.rotation = c.rotation;
    hyp.t_dir = c.t_dir;
    const Homography hc = homography_from_motion_plane(k, c.rotation, c.t_dir, hyp.plane);
    hyp.residual = detail::mean_transfer(hc, pairs, fit.inliers);
    patch.hypotheses.push_back(hyp);
  }
  int best = 0;
  for (int i = 1; i < static_cast<int>(patch.hypotheses.size()); ++i)
    if (patch.hypotheses[i].residual < patch.hypotheses[best].residual - 1e-9) best = i;
  select_hypothesis(patch, best, sp, k);
  return patch;
}

/// Least-squares plane for a fixed motion (R, t with |t| = 1): the flow
/// constraint x' ~ K (R - t m^T) K^-1 x is linear in m = n / d.
inline std::optional<Plane> fit_plane_given_motion(const Intrinsics& k, const Rotation& r,
                                                   const Vector3d& t,
                                                   std::span<const Correspondence> pairs) {
  if (t.squaredNorm() == 0.0 || pairs.size() < 3) return std::nullopt;
  const Matrix3d kinv = k.inverse();
  Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
  Eigen::Vector3d atb = Eigen::Vector3d::Zero();
  for (const auto& c : pairs) {
    const Vector3d a = kinv * c.x.homogeneous();
    const Vector3d b = kinv * c.xp.homogeneous();
    // b x (R a) = (b x t) (a^T m)
    const Vector3d rhs = b.cross(r * a);
    const Vector3d bt = b.cross(t);
    const Eigen::Matrix3d row = bt * a.transpose();
    ata += row.transpose() * row;
    atb += row.transpose() * rhs;
  }
  const Eigen::Vector3d m = ata.ldlt().solve(atb);
  const double len = m.norm();
  if (!std::isfinite(len) || len < 1e-12) return std::nullopt;
  return Plane(m / len, 1.0 / len);
}

/// Distinct unordered superpixel pairs sharing a border, with the number of
/// 4-adjacent pixel pairs along it.
inline std::map<std::pair<int, int>, int> border_lengths(const std::vector<BoundaryPair>& pairs) {
  std::map<std::pair<int, int>, int> out;
  for (const auto& p : pairs)
    if (p.sp_a < p.sp_b) ++out[{p.sp_a, p.sp_b}];
  return out;
}

/// A rigid motion at unit translation shared by several patches.
struct SharedMotion {
  Rotation rotation;
  Vector3d t_dir = Vector3d::Zero();
  int support = 0;  // patches it explained when selected
};

struct SharedMotionOptions {
  int rings = 2;               // region = seed plus neighbours up to this border distance
  int min_pairs = 60;
  double merge_distance = 0.02;
  int max_motions = 8;
  int min_support = 3;
  double ambiguity_overlap = 0.8;
  double ambiguity_distance = 0.2;
  double explain_margin = 6.0;  // allowed NLL excess over the patch's own fit
  double min_noise_px = 0.01;   // floor on the estimated flow noise
  double truncation_sigmas = 3.0;
  HomographyFitOptions fit;
};

/// Flow noise estimate from the own-fit residuals of reliable patches
/// (mean 2D error of Gaussian noise = sigma * sqrt(pi / 2)).
inline double estimate_flow_noise(const std::vector<PlanarPatch>& patches, double floor_px) {
  std::vector<double> r;
  for (const auto& p : patches)
    if (p.reliable()) r.push_back(p.residual);
  if (r.empty()) return floor_px;
  std::nth_element(r.begin(), r.begin() + r.size() / 2, r.end());
  return std::max(floor_px, r[r.size() / 2] / std::sqrt(M_PI / 2.0));
}

namespace detail {

inline std::vector<std::vector<int>> border_neighbours(int n, const std::vector<BoundaryPair>& pairs) {
  std::vector<std::vector<int>> nb(n);
  for (const auto& [key, len] : border_lengths(pairs)) {
    nb[key.first].push_back(key.second);
    nb[key.second].push_back(key.first);
  }
  return nb;
}

// Truncated Gaussian negative log-likelihood of a patch's flow.
struct FlowLikelihood {
  double sigma = 1.0;
  double cap = 9.0;
  FlowLikelihood(double s, double sigmas) : sigma(s), cap(std::pow(sigmas * s, 2)) {}
  double operator()(const Intrinsics& k, const PatchHypothesis& h,
                    std::span<const Correspondence> pairs) const {
    const Homography hm = homography_from_motion_plane(k, h.rotation, h.t_dir, h.plane);
    double s = 0.0;
    for (const auto& c : pairs) s += std::min((hm.apply(c.x) - c.xp).squaredNorm(), cap);
    return s / (2.0 * sigma * sigma);
  }
};

// The motion with its plane refitted to the patch's flow, if that plane
// lies in front of the camera along every given ray.
inline std::optional<PatchHypothesis> refit_for_motion(const Intrinsics& k, const Rotation& r,
                                                       const Vector3d& t,
                                                       std::span<const Correspondence> pairs,
                                                       const std::vector<Vector3d>& rays) {
  const auto pl = fit_plane_given_motion(k, r, t, pairs);
  if (!pl) return std::nullopt;
  for (const auto& ray : rays)
    if (!(pl->normal.dot(ray) < -1e-9)) return std::nullopt;
  PatchHypothesis h{*pl, r, t, 0.0};
  const Homography hm = homography_from_motion_plane(k, r, t, *pl);
  double sum = 0.0;
  for (const auto& c : pairs) sum += (hm.apply(c.x) - c.xp).norm();
  h.residual = pairs.empty() ? 0.0 : sum / double(pairs.size());
  return h;
}

inline std::vector<Vector3d> patch_rays(const Superpixel& sp, const Intrinsics& k) {
  std::vector<Vector3d> rays{k.ray(sp.anchor_px())};
  for (const auto& px : sp.boundary) rays.push_back(k.ray(Vector2d(px.u, px.v)));
  return rays;
}

}  // namespace detail

/// A single superpixel spans too small a field of view to tell rotation from
/// translation once the flow is noisy. Homographies fitted on grown regions
/// do much better. Their decompositions (both twins) become candidates; the
/// final set is chosen greedily by how many not-yet-explained patches each
/// candidate explains nearly as well as the patch's own fit, which discards
/// the spurious twin of every region.
inline std::vector<SharedMotion> region_motions(const std::vector<PlanarPatch>& patches,
                                                const std::vector<Superpixel>& sps,
                                                const std::vector<BoundaryPair>& boundary_pairs,
                                                const std::vector<std::vector<Correspondence>>& corr,
                                                const Intrinsics& k, const SharedMotionOptions& opt = {}) {
  const int n = static_cast<int>(sps.size());
  const auto nb = detail::border_neighbours(n, boundary_pairs);
  std::vector<SharedMotion> cand;
  std::vector<int> mark(n, -1);
  for (int seed = 0; seed < n; ++seed) {
    std::vector<int> region{seed}, frontier{seed};
    mark[seed] = seed;
    for (int r = 0; r < opt.rings; ++r) {
      std::vector<int> next;
      for (int i : frontier)
        for (int j : nb[i])
          if (mark[j] != seed) {
            mark[j] = seed;
            next.push_back(j);
          }
      region.insert(region.end(), next.begin(), next.end());
      frontier = std::move(next);
    }
    std::vector<Correspondence> pairs;
    std::vector<Vector2d> check;
    for (int i : region) {
      pairs.insert(pairs.end(), corr[i].begin(), corr[i].end());
      check.push_back(sps[i].anchor_px());
    }
    if (static_cast<int>(pairs.size()) < opt.min_pairs) continue;
    try {
      const HomographyFit fit = fit_homography(pairs, opt.fit);
      for (const auto& c : decompose_homography(fit.h, k, check)) {
        if (c.pure_rotation || c.ratio < 1e-12) continue;
        const bool dup = std::any_of(cand.begin(), cand.end(), [&](const SharedMotion& m) {
          return motion_frobenius_distance({m.rotation, m.t_dir, 1.0}, {c.rotation, c.t_dir, 1.0}) <
                 opt.merge_distance;
        });
        if (!dup) cand.push_back({c.rotation, c.t_dir, 0});
      }
    } catch (const Error&) {
    }
  }

  // explained[c] = patches candidate c explains.
  const detail::FlowLikelihood nll(estimate_flow_noise(patches, opt.min_noise_px), opt.truncation_sigmas);
  std::vector<std::vector<int>> explained(cand.size());
  for (int i = 0; i < n; ++i) {
    const auto& p = patches[i];
    if (!p.reliable() || !p.translating() || p.hypotheses.empty()) continue;
    double own = std::numeric_limits<double>::infinity();
    for (const auto& h : p.hypotheses) own = std::min(own, nll(k, h, corr[i]));
    const auto rays = detail::patch_rays(sps[i], k);
    for (std::size_t c = 0; c < cand.size(); ++c)
      if (const auto h = detail::refit_for_motion(k, cand[c].rotation, cand[c].t_dir, corr[i], rays))
        if (nll(k, *h, corr[i]) <= own + opt.explain_margin) explained[c].push_back(i);
  }
  std::vector<SharedMotion> chosen;
  std::vector<char> covered(n, 0);
  std::vector<char> used(cand.size(), 0);
  while (static_cast<int>(chosen.size()) < opt.max_motions) {
    int best = -1, best_gain = 0;
    for (std::size_t c = 0; c < cand.size(); ++c) {
      if (used[c]) continue;
      int gain = 0;
      for (int i : explained[c]) gain += !covered[i];
      if (gain > best_gain) {
        best_gain = gain;
        best = static_cast<int>(c);
      }
    }
    if (best < 0 || best_gain < opt.min_support) break;
    // Distinct candidates explaining most of the same new patches are kept
    // too (typically the decomposition twin of a single-plane object); the
    // neighbourhood decides between them later.
    std::vector<int> take{best};
    for (std::size_t c = 0; c < cand.size(); ++c) {
      if (used[c] || static_cast<int>(c) == best) continue;
      int overlap = 0;
      for (int i : explained[c]) overlap += !covered[i] && std::binary_search(explained[best].begin(),
                                                                             explained[best].end(), i);
      if (overlap < opt.ambiguity_overlap * best_gain) continue;
      const bool distinct = std::all_of(take.begin(), take.end(), [&](int t) {
        return motion_frobenius_distance({cand[c].rotation, cand[c].t_dir, 1.0},
                                         {cand[t].rotation, cand[t].t_dir, 1.0}) > opt.ambiguity_distance;
      });
      if (distinct) take.push_back(static_cast<int>(c));
    }
    for (int t : take) {
      used[t] = 1;
      chosen.push_back(cand[t]);
      chosen.back().support = best_gain;
    }
    for (int i : explained[best]) covered[i] = 1;
  }
  return chosen;
}

/// Motion shared by several patches, each with its own plane: Levenberg-
/// Marquardt on the 5-dof motion (rotation, translation direction) where the
/// residual re-solves every member's plane for the trial motion. Starts
/// from (r0, t0); returns nullopt if no member yields a plane.
inline std::optional<std::pair<Rotation, Vector3d>> fit_shared_motion(
    const Intrinsics& k, const std::vector<std::vector<Correspondence>>& corr,
    const std::vector<int>& members, const Rotation& r0, const Vector3d& t0, int max_iterations = 30) {
  auto basis = [](const Vector3d& t) {
    Vector3d a = std::abs(t.x()) < 0.9 ? Vector3d::UnitX() : Vector3d::UnitY();
    const Vector3d b1 = t.cross(a).normalized();
    return std::pair{b1, t.cross(b1)};
  };
  std::size_t rows = 0;
  for (int i : members) rows += 2 * corr[i].size();
  auto residual = [&](const Rotation& r, const Vector3d& t, Eigen::VectorXd& out) {
    out.setZero(static_cast<Eigen::Index>(rows));
    Eigen::Index row = 0;
    int planes = 0;
    for (int i : members) {
      const auto pl = fit_plane_given_motion(k, r, t, corr[i]);
      if (pl) {
        ++planes;
        const Homography h = homography_from_motion_plane(k, r, t, *pl);
        for (const auto& c : corr[i]) {
          const Vector2d e = h.apply(c.x) - c.xp;
          out(row++) = e.x();
          out(row++) = e.y();
        }
      } else {
        row += 2 * static_cast<Eigen::Index>(corr[i].size());
      }
      // Members without a plane contribute zero; they are rare and leaving
      // them out keeps the residual length fixed.
    }
    return planes > 0;
  };
  Rotation r = r0;
  Vector3d t = t0.normalized();
  Eigen::VectorXd f, f2;
  if (!residual(r, t, f)) return std::nullopt;
  double cost = f.squaredNorm(), mu = 1e-3;
  auto step = [&](const Eigen::Matrix<double, 5, 1>& x) {
    const auto [b1, b2] = basis(t);
    return std::pair{Rotation::exp(x.head<3>()) * r, (t + x(3) * b1 + x(4) * b2).normalized()};
  };
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::MatrixXd jac(f.size(), 5);
    const double h = 1e-6;
    for (int c = 0; c < 5; ++c) {
      Eigen::Matrix<double, 5, 1> x = Eigen::Matrix<double, 5, 1>::Zero();
      x(c) = h;
      const auto [rp, tp] = step(x);
      residual(rp, tp, f2);
      jac.col(c) = (f2 - f) / h;
    }
    const Eigen::Matrix<double, 5, 5> jtj = jac.transpose() * jac;
    const Eigen::Matrix<double, 5, 1> g = jac.transpose() * f;
    bool improved = false;
    for (int tries = 0; tries < 10 && !improved; ++tries) {
      Eigen::Matrix<double, 5, 5> a = jtj;
      a.diagonal() += mu * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::Matrix<double, 5, 1> dx = -a.ldlt().solve(g);
      const auto [rn, tn] = step(dx);
      if (residual(rn, tn, f2) && f2.squaredNorm() < cost) {
        r = rn;
        t = tn;
        f = f2;
        const double prev = cost;
        cost = f.squaredNorm();
        mu = std::max(mu * 0.3, 1e-9);
        improved = true;
        if (prev - cost < 1e-10 * prev) return std::pair{r, t};
      } else {
        mu *= 10.0;
      }
    }
    if (!improved) break;
  }
  return std::pair{r, t};
}

struct MotionSelectionOptions {
  double smoothness = 2.0;  // per border-sharing pair, times the motion distance
  double min_noise_px = 0.01;
  double truncation_sigmas = 3.0;
  int rounds = 2;           // selections, each followed by a refit of the shared motions
  double max_refit_jump = 0.3;
};

/// Picks one motion per reliable translating patch among its own
/// decomposition hypotheses and the shared motions (plane refitted to the
/// patch's flow). Unary: truncated Gaussian negative log-likelihood of the
/// flow at the estimated noise level; pairwise: motion distance across
/// shared borders. With clean flow each patch keeps its own exact fit;
/// with noisy flow neighbours agree on a well-conditioned shared motion.
/// Between rounds every shared motion is re-estimated from the union of the
/// patches that chose it. Also resolves the decomposition's twofold
/// ambiguity.
inline void select_motions(std::vector<PlanarPatch>& patches, const std::vector<Superpixel>& sps,
                           const std::vector<BoundaryPair>& boundary_pairs,
                           const std::vector<std::vector<Correspondence>>& corr, const Intrinsics& k,
                           std::vector<SharedMotion> shared, const MotionSelectionOptions& opt = {}) {
  const int n = static_cast<int>(patches.size());
  const detail::FlowLikelihood nll(estimate_flow_noise(patches, opt.min_noise_px), opt.truncation_sigmas);
  std::vector<std::size_t> own(n);
  std::vector<std::vector<Vector3d>> rays(n);
  std::vector<char> active(n, 0);
  for (int i = 0; i < n; ++i) {
    own[i] = patches[i].hypotheses.size();
    active[i] = patches[i].reliable() && patches[i].translating() && corr[i].size() >= 3;
    if (active[i]) rays[i] = detail::patch_rays(sps[i], k);
  }
  const auto borders = border_lengths(boundary_pairs);

  for (int round = 0; round < opt.rounds; ++round) {
    // labels own[i] + j  <->  shared motion slot[i][j]
    std::vector<std::vector<int>> slot(n);
    PairwiseMrf mrf;
    for (int i = 0; i < n; ++i) {
      auto& p = patches[i];
      p.hypotheses.resize(own[i]);
      if (p.chosen >= static_cast<int>(own[i])) p.chosen = 0;
      if (active[i])
        for (std::size_t m = 0; m < shared.size(); ++m)
          if (const auto h = detail::refit_for_motion(k, shared[m].rotation, shared[m].t_dir, corr[i], rays[i])) {
            p.hypotheses.push_back(*h);
            slot[i].push_back(static_cast<int>(m));
          }
      Eigen::VectorXd unary = Eigen::VectorXd::Zero(std::max<std::size_t>(1, p.hypotheses.size()));
      if (active[i])
        for (std::size_t a = 0; a < p.hypotheses.size(); ++a) unary(a) = nll(k, p.hypotheses[a], corr[i]);
      mrf.add_node(unary);
    }
    for (const auto& [key, len] : borders) {
      const auto& a = patches[key.first];
      const auto& b = patches[key.second];
      if (!a.reliable() || !b.reliable()) continue;
      if (a.hypotheses.size() < 2 && b.hypotheses.size() < 2) continue;
      Eigen::MatrixXd cost(a.hypotheses.size(), b.hypotheses.size());
      for (std::size_t i = 0; i < a.hypotheses.size(); ++i)
        for (std::size_t j = 0; j < b.hypotheses.size(); ++j)
          cost(i, j) = opt.smoothness * motion_frobenius_distance(
                                            {a.hypotheses[i].rotation, a.hypotheses[i].t_dir, 1.0},
                                            {b.hypotheses[j].rotation, b.hypotheses[j].t_dir, 1.0});
      mrf.add_edge(key.first, key.second, cost);
    }
    std::vector<int> init;
    for (const auto& p : patches) init.push_back(p.hypotheses.empty() ? 0 : p.chosen);
    const TrwsResult r = trws(mrf, {}, init);
    std::vector<std::vector<int>> members(shared.size());
    for (int i = 0; i < n; ++i) {
      auto& p = patches[i];
      if (!p.reliable() || p.hypotheses.empty()) continue;
      if (r.labeling[i] != p.chosen) select_hypothesis(p, r.labeling[i], sps[i], k);
      if (p.chosen >= static_cast<int>(own[i])) members[slot[i][p.chosen - own[i]]].push_back(i);
    }
    if (round + 1 == opt.rounds) break;

    for (std::size_t m = 0; m < shared.size(); ++m)
      if (members[m].size() >= 2) {
        const RigidMotion cur{shared[m].rotation, shared[m].t_dir, 1.0};
        const auto fit = fit_shared_motion(k, corr, members[m], shared[m].rotation, shared[m].t_dir);
        if (fit && motion_frobenius_distance(cur, {fit->first, fit->second, 1.0}) < opt.max_refit_jump) {
          shared[m].rotation = fit->first;
          shared[m].t_dir = fit->second;
        }
      }
  }
}

/// Static and unreliable patches borrow the plane (and later the scale) of
/// the reliable neighbour sharing the longest border, propagating outward
/// until every patch has a proxy. Unreliable patches borrow the motion too.
inline void assign_proxies(std::vector<PlanarPatch>& patches, const std::vector<Superpixel>& sps,
                           const std::vector<BoundaryPair>& boundary_pairs, const Intrinsics& k) {
  const int n = static_cast<int>(patches.size());
  std::vector<std::vector<std::pair<int, int>>> nbrs(n);  // (neighbour, border length)
  for (const auto& [key, len] : border_lengths(boundary_pairs)) {
    nbrs[key.first].push_back({key.second, len});
    nbrs[key.second].push_back({key.first, len});
  }
  std::vector<int> root(n, -1);
  for (int i = 0; i < n; ++i)
    if (patches[i].reliable()) root[i] = i;
  if (std::none_of(root.begin(), root.end(), [](int r) { return r >= 0; })) return;
  bool progress = true;
  while (progress) {
    progress = false;
    std::vector<int> next = root;
    for (int i = 0; i < n; ++i) {
      if (root[i] >= 0) continue;
      int best = -1, best_len = 0;
      for (const auto& [j, len] : nbrs[i])
        if (root[j] >= 0 && (len > best_len || (len == best_len && j < best))) {
          best = j;
          best_len = len;
        }
      if (best < 0) continue;
      next[i] = root[best];
      progress = true;
    }
    root = std::move(next);
  }
  for (int i = 0; i < n; ++i) {
    auto& p = patches[i];
    if (p.reliable() || root[i] < 0) continue;
    const auto& src = patches[root[i]];
    p.proxy = root[i];
    p.plane = src.plane;
    if (p.status == PatchStatus::Unreliable) {
      p.rotation = src.rotation;
      p.t_dir = src.t_dir;
    }
    try {
      update_patch_points(p, sps[i], k);
    } catch (const Error&) {
      // The borrowed plane does not cover this patch's rays; fall back to a
      // fronto-parallel plane through the proxy's anchor depth.
      p.plane = Plane(Vector3d(0, 0, -1), src.anchor3d.z());
      update_patch_points(p, sps[i], k);
    }
  }
}

inline std::vector<Vector3d> unit_scale_anchors(const std::vector<PlanarPatch>& patches) {
  std::vector<Vector3d> out;
  out.reserve(patches.size());
  for (const auto& p : patches) out.push_back(p.anchor3d);
  return out;
}

}  // namespace sps
