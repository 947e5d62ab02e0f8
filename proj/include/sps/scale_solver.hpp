#pragma once

// Per-patch scale recovery: with planes and motion directions fixed, E_arap
// is a function of the scales alone,
//   sum_edges w * ( sqrt(c_R + |l_i t_i - l_k t_k|^2)
//                 + | |l_i A_i - l_k A_k| - |l_i B_i - l_k B_k| | ),
// where A is the unit-scale anchor and B = R A + t its image. It is
// minimized over the simplex sum(l) = 1, l > 0 with a log barrier and damped
// Newton steps on a pseudo-Huber smoothing of both kinks.

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sps/energy.hpp"
#include "sps/errors.hpp"
#include "sps/scene_graph.hpp"

namespace sps {

struct ScaleSolverOptions {
  double delta = 1e-6;  // pseudo-Huber width at the final stage
  double kkt_tolerance = 1e-6;
  int max_newton_per_stage = 60;
  int max_stages = 40;
};

struct ScaleSolution {
  std::vector<double> lambda;
  double energy = 0.0;  // E_arap at lambda (unsmoothed)
  std::vector<double> energy_history;
  double kkt_residual = 0.0;
  int iterations = 0;
  bool converged = false;
  bool observable = true;  // false: nothing translates, lambda left uniform
};

namespace detail {

struct ScaleEdge {
  int vi = 0, vk = 0;  // variable indices
  double w = 0.0;
  double c_rot = 0.0;
  Vector3d ti, tk;
  bool distance_term = true;
  Vector3d ai, ak, bi, bk;
};

struct ScaleProblem {
  int n_vars = 0;
  std::vector<double> multiplicity;  // patches sharing each variable
  std::vector<ScaleEdge> edges;

  // Smoothed energy (delta > 0) or the exact one (delta == 0), with optional
  // gradient and Hessian triplets.
  double eval(const Eigen::VectorXd& l, double delta, Eigen::VectorXd* grad = nullptr,
              std::vector<Eigen::Triplet<double>>* hess = nullptr) const {
    double e = 0.0;
    if (grad) grad->setZero(n_vars);
    for (const auto& ed : edges) {
      const Eigen::Vector2d lv(l[ed.vi], l[ed.vk]);
      Eigen::Vector2d g = Eigen::Vector2d::Zero();
      Eigen::Matrix2d h = Eigen::Matrix2d::Zero();

      // Motion term: sqrt(c + |J l|^2 + delta^2) - delta.
      {
        Eigen::Matrix<double, 3, 2> j;
        j << ed.ti, -ed.tk;
        const Vector3d v = j * lv;
        const double s = std::sqrt(ed.c_rot + v.squaredNorm() + delta * delta);
        e += ed.w * (s - delta);
        if (grad && s > 0) {
          const Eigen::Vector2d jv = j.transpose() * v;
          g += ed.w * jv / s;
          h += ed.w * (j.transpose() * j / s - jv * jv.transpose() / (s * s * s));
        }
      }
      if (ed.distance_term) {
        Eigen::Matrix<double, 3, 2> ja, jb;
        ja << ed.ai, -ed.ak;
        jb << ed.bi, -ed.bk;
        const Vector3d ua = ja * lv, ub = jb * lv;
        const double na = ua.norm(), nb = ub.norm();
        const double gap = na - nb;
        const double r = std::sqrt(gap * gap + delta * delta);
        e += ed.w * (r - delta);
        if (grad && na > 0 && nb > 0 && r > 0) {
          const Eigen::Vector2d ga = ja.transpose() * ua / na, gb = jb.transpose() * ub / nb;
          const Eigen::Matrix2d ha =
              ja.transpose() * (Matrix3d::Identity() - ua * ua.transpose() / (na * na)) * ja / na;
          const Eigen::Matrix2d hb =
              jb.transpose() * (Matrix3d::Identity() - ub * ub.transpose() / (nb * nb)) * jb / nb;
          const Eigen::Vector2d dg = ga - gb;
          const double d1 = gap / r, d2 = delta * delta / (r * r * r);
          g += ed.w * d1 * dg;
          h += ed.w * (d2 * dg * dg.transpose() + d1 * (ha - hb));
        }
      }
      if (grad) {
        const int idx[2] = {ed.vi, ed.vk};
        for (int a = 0; a < 2; ++a) {
          (*grad)[idx[a]] += g[a];
          if (hess)
            for (int b = 0; b < 2; ++b) hess->emplace_back(idx[a], idx[b], h(a, b));
        }
      }
    }
    return e;
  }
};

// Stationarity residual of min E s.t. m.l = 1, l >= 0.
inline double kkt_residual(const Eigen::VectorXd& l, const Eigen::VectorXd& grad,
                           const Eigen::VectorXd& m) {
  const double lmax = l.maxCoeff();
  double num = 0, den = 0;
  for (int i = 0; i < l.size(); ++i)
    if (l[i] > 1e-8 * lmax) {
      num += m[i] * grad[i];
      den += m[i] * m[i];
    }
  const double nu = den > 0 ? -num / den : 0.0;
  double r = 0.0;
  for (int i = 0; i < l.size(); ++i) {
    const double s = grad[i] + nu * m[i];
    r = std::max(r, l[i] > 1e-8 * lmax ? std::abs(s) : std::max(0.0, -s));
  }
  return r;
}

}  // namespace detail

/// Variable each patch's scale is tied to: its proxy when it has one.
inline std::vector<int> scale_ties(const std::vector<PlanarPatch>& patches) {
  std::vector<int> tie(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i)
    tie[i] = (!patches[i].reliable() && patches[i].proxy >= 0) ? patches[i].proxy : int(i);
  return tie;
}

/// Minimizes E_arap over the per-patch scales. `tie[i]` names the patch
/// whose scale patch i shares (identity when empty). `initial` (optional)
/// is a starting point, renormalized onto the simplex.
inline ScaleSolution solve_scales(const SceneContext& ctx, const SceneState& state,
                                  const EnergyParams& prm, std::vector<int> tie = {},
                                  const ScaleSolverOptions& opt = {},
                                  std::span<const double> initial = {}) {
  const int n = ctx.size();
  if (n == 0) throw InputError("solve_scales: empty scene");
  if (static_cast<int>(state.patches.size()) != n)
    throw InputError("solve_scales: state and context sizes differ");
  ScaleSolution out;
  if (n == 1) {
    out.lambda = {1.0};
    out.converged = true;
    out.observable = ctx.is_static[0] ? false : state.patches[0].t_dir.squaredNorm() > 0;
    return out;
  }
  if (!is_connected(ctx.knn)) throw GaugeError("K-NN graph is disconnected; relative scales are unobservable");
  if (tie.empty()) {
    tie.resize(n);
    for (int i = 0; i < n; ++i) tie[i] = i;
  }
  if (static_cast<int>(tie.size()) != n) throw InputError("solve_scales: tie size mismatch");

  // Variables are the distinct tie targets.
  std::vector<int> var(n, -1), root_of;
  detail::ScaleProblem prob;
  for (int i = 0; i < n; ++i) {
    const int r = tie[i];
    if (r < 0 || r >= n || tie[r] != r) throw InputError("solve_scales: ties must point at self-tied patches");
    if (var[r] < 0) {
      var[r] = prob.n_vars++;
      root_of.push_back(r);
      prob.multiplicity.push_back(0.0);
    }
  }
  for (int i = 0; i < n; ++i) {
    var[i] = var[tie[i]];
    prob.multiplicity[var[i]] += 1.0;
  }

  bool translating = false;
  for (int i = 0; i < n; ++i)
    if (!ctx.is_static[i] && state.patches[i].t_dir.squaredNorm() > 0) translating = true;
  auto expand = [&](const Eigen::VectorXd& l) {
    std::vector<double> lam(n);
    for (int i = 0; i < n; ++i) lam[i] = l[var[i]];
    return lam;
  };

  const double diag = ctx.diagonal();
  for (int i = 0; i < n; ++i) {
    for (int k : ctx.knn[i]) {
      const auto &si = state.patches[i], &sk = state.patches[k];
      detail::ScaleEdge ed;
      ed.vi = var[i];
      ed.vk = var[k];
      ed.w = weight_arap(ctx.superpixels[i].anchor_px(), ctx.superpixels[k].anchor_px(), prm.beta,
                         diag);
      ed.c_rot = (si.rotation.matrix() - sk.rotation.matrix()).squaredNorm();
      ed.ti = prm.translation_balance * si.t_dir;
      ed.tk = prm.translation_balance * sk.t_dir;
      ed.distance_term = !ctx.is_static[i] && !ctx.is_static[k];
      PatchState ui = si, uk = sk;
      ui.lambda = uk.lambda = 1.0;
      ed.ai = ui.point(ctx.anchor_rays[i]);
      ed.ak = uk.point(ctx.anchor_rays[k]);
      ed.bi = ui.moved(ed.ai);
      ed.bk = uk.moved(ed.ak);
      prob.edges.push_back(ed);
    }
  }
  const Eigen::VectorXd m = Eigen::Map<const Eigen::VectorXd>(prob.multiplicity.data(), prob.n_vars);

  Eigen::VectorXd l(prob.n_vars);
  if (!initial.empty()) {
    if (static_cast<int>(initial.size()) != n) throw InputError("solve_scales: initial size mismatch");
    for (int v = 0; v < prob.n_vars; ++v) l[v] = std::max(initial[root_of[v]], 1e-12);
  } else {
    l.setOnes();
  }
  l /= m.dot(l);
  if (prob.n_vars == 2 && initial.empty()) {
    // One-dimensional problem: start from the best point of a coarse scan so
    // Newton lands in the global basin.
    double best = prob.eval(l, 0.0);
    for (int g = 1; g < 1000; ++g) {
      Eigen::VectorXd c(2);
      c << g * 1e-3 / m[0], (1.0 - g * 1e-3) / m[1];
      const double e = prob.eval(c, 0.0);
      if (e < best) {
        best = e;
        l = c;
      }
    }
  }

  if (!translating) {
    out.lambda = std::vector<double>(n, 1.0 / n);
    out.observable = false;
    out.energy = prob.eval(Eigen::VectorXd::Constant(prob.n_vars, 1.0 / n), 0.0);
    return out;
  }

  // Monotone quantity: the smoothed objective at the final width.
  double e_mon = prob.eval(l, opt.delta);
  out.energy_history.push_back(e_mon);
  const double e_scale = std::max(e_mon, 1e-12);
  double mu = 1e-3 * e_scale / prob.n_vars;
  double delta = std::max(opt.delta, 1e-3 * e_scale / std::max<std::size_t>(prob.edges.size(), 1));
  const double mu_floor = 1e-16 * e_scale / prob.n_vars;

  auto barrier_obj = [&](const Eigen::VectorXd& x, double d, double mu_) {
    double f = prob.eval(x, d);
    for (int v = 0; v < x.size(); ++v) f -= mu_ * m[v] * std::log(x[v]);
    return f;
  };

  Eigen::VectorXd grad(prob.n_vars);
  std::vector<Eigen::Triplet<double>> trip;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
  for (int stage = 0; stage < opt.max_stages; ++stage) {
    for (int it = 0; it < opt.max_newton_per_stage; ++it) {
      trip.clear();
      const double f0 = prob.eval(l, delta, &grad, &trip);
      (void)f0;
      double diag_max = 0.0;
      for (int v = 0; v < prob.n_vars; ++v) {
        grad[v] -= mu * m[v] / l[v];
        trip.emplace_back(v, v, mu * m[v] / (l[v] * l[v]));
      }
      Eigen::SparseMatrix<double> h(prob.n_vars, prob.n_vars);
      h.setFromTriplets(trip.begin(), trip.end());
      for (int v = 0; v < prob.n_vars; ++v) diag_max = std::max(diag_max, std::abs(h.coeff(v, v)));

      // Damp until positive definite.
      Eigen::VectorXd step;
      double tau = 0.0;
      for (int attempt = 0; attempt < 30; ++attempt) {
        Eigen::SparseMatrix<double> hd = h;
        if (tau > 0)
          for (int v = 0; v < prob.n_vars; ++v) hd.coeffRef(v, v) += tau;
        ldlt.compute(hd);
        if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0).all()) {
          const Eigen::VectorXd x1 = ldlt.solve(-grad), x2 = ldlt.solve(m);
          step = x1 - (m.dot(x1) / m.dot(x2)) * x2;
          break;
        }
        tau = tau > 0 ? tau * 10 : 1e-10 * std::max(diag_max, 1e-300);
      }
      if (step.size() == 0 || !step.allFinite()) break;
      const double slope = grad.dot(step);
      if (!(slope < 0)) break;

      double alpha = 1.0;
      for (int v = 0; v < prob.n_vars; ++v)
        if (step[v] < 0) alpha = std::min(alpha, -0.995 * l[v] / step[v]);
      const double fb = barrier_obj(l, delta, mu);
      bool accepted = false;
      for (int bt = 0; bt < 40; ++bt, alpha *= 0.5) {
        Eigen::VectorXd cand = l + alpha * step;
        cand /= m.dot(cand);  // keep the constraint exact
        if ((cand.array() <= 0).any()) continue;
        const double fc = barrier_obj(cand, delta, mu);
        if (!(fc <= fb + 1e-4 * alpha * slope)) continue;
        const double ec = prob.eval(cand, opt.delta);
        if (ec > e_mon) continue;
        l = cand;
        e_mon = ec;
        accepted = true;
        break;
      }
      if (!accepted) {
        break;
      }
      ++out.iterations;
      out.energy_history.push_back(e_mon);
      if (-slope < 1e-14 * std::max(1.0, e_scale)) break;  // Newton decrement
    }
    prob.eval(l, opt.delta, &grad);
    out.kkt_residual = detail::kkt_residual(l, grad, m);
    if (delta <= opt.delta && mu <= mu_floor) break;
    if (delta <= opt.delta && out.kkt_residual < opt.kkt_tolerance && mu < 1e-3 * opt.kkt_tolerance)
      break;
    mu = std::max(mu * 0.1, mu_floor);
    delta = std::max(delta * 0.1, opt.delta);
  }
  prob.eval(l, opt.delta, &grad);
  out.kkt_residual = detail::kkt_residual(l, grad, m);
  out.converged = out.kkt_residual < opt.kkt_tolerance;
  out.lambda = expand(l);
  out.energy = prob.eval(l, 0.0);
  return out;
}

}  // namespace sps
