#pragma once

// Sequential tree-reweighted max-product message passing (TRW-S) for
// pairwise MRFs with per-node label sets.
//
// Edges are oriented from the lower to the higher node index, and the
// graph is covered by chains that are monotone in that order; node s lies on
// rho_s = max(#lower neighbours, #higher neighbours) chains and every edge on
// exactly one. The message weight is 1 / rho_s, which makes the chain-sum
// lower bound non-decreasing across passes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sps/errors.hpp"

namespace sps {

class PairwiseMrf {
 public:
  struct Edge {
    int i = 0;  // i < j
    int j = 0;
    Eigen::MatrixXd cost;  // labels(i) x labels(j)
  };

  int add_node(const Eigen::VectorXd& unary) {
    if (unary.size() < 1) throw InputError("mrf node needs at least one label");
    if (!unary.allFinite()) throw InputError("mrf unary costs must be finite");
    unary_.push_back(unary);
    return static_cast<int>(unary_.size()) - 1;
  }

  /// cost(a, b) is the energy of label a at node i and label b at node j.
  void add_edge(int i, int j, const Eigen::MatrixXd& cost) {
    if (i == j || i < 0 || j < 0 || i >= num_nodes() || j >= num_nodes())
      throw InputError("mrf edge endpoints are invalid");
    if (cost.rows() != labels(i) || cost.cols() != labels(j))
      throw InputError("mrf edge cost has the wrong shape");
    if (!cost.allFinite()) throw InputError("mrf pairwise costs must be finite");
    if (i < j)
      edges_.push_back({i, j, cost});
    else
      edges_.push_back({j, i, cost.transpose()});
  }

  int num_nodes() const { return static_cast<int>(unary_.size()); }
  int labels(int i) const { return static_cast<int>(unary_[i].size()); }
  const Eigen::VectorXd& unary(int i) const { return unary_[i]; }
  const std::vector<Edge>& edges() const { return edges_; }

  double energy(const std::vector<int>& x) const {
    if (static_cast<int>(x.size()) != num_nodes()) throw InputError("labeling has the wrong size");
    double e = 0.0;
    for (int i = 0; i < num_nodes(); ++i) e += unary_[i](x[i]);
    for (const auto& edge : edges_) e += edge.cost(x[edge.i], x[edge.j]);
    return e;
  }

 private:
  std::vector<Eigen::VectorXd> unary_;
  std::vector<Edge> edges_;
};

struct TrwsOptions {
  int max_iterations = 50;
  double bound_tolerance = 1e-12;
  bool polish = true;  // greedy single-node descent on the decoded labeling
};

struct TrwsResult {
  std::vector<int> labeling;
  double energy = 0.0;
  double lower_bound = -std::numeric_limits<double>::infinity();
  std::vector<double> bound_history;  // one entry per forward+backward pass
  int iterations = 0;
};

namespace detail {

struct TrwsAdjacency {
  int edge = 0;
  int other = 0;
};

/// Iterated conditional modes; never increases the energy.
inline void icm_polish(const PairwiseMrf& mrf, const std::vector<std::vector<TrwsAdjacency>>& adj,
                       std::vector<int>& x) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool changed = false;
    for (int s = 0; s < mrf.num_nodes(); ++s) {
      Eigen::VectorXd local = mrf.unary(s);
      for (const auto& a : adj[s]) {
        const auto& e = mrf.edges()[a.edge];
        if (e.i == s)
          local += e.cost.col(x[e.j]);
        else
          local += e.cost.row(x[e.i]).transpose();
      }
      Eigen::Index best;
      const double best_value = local.minCoeff(&best);
      if (best_value < local(x[s]) - 1e-15 * (1.0 + std::abs(best_value))) {
        x[s] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed) break;
  }
}

/// Pairwise block descent: re-optimizes the two ends of each edge jointly
/// given the rest. Never increases the energy; escapes some local minima
/// that single-node moves cannot.
inline void edge_polish(const PairwiseMrf& mrf, const std::vector<std::vector<TrwsAdjacency>>& adj,
                        std::vector<int>& x) {
  auto conditional = [&](int s, int skip_edge) {
    Eigen::VectorXd local = mrf.unary(s);
    for (const auto& a : adj[s]) {
      if (a.edge == skip_edge) continue;
      const auto& e = mrf.edges()[a.edge];
      if (e.i == s)
        local += e.cost.col(x[e.j]);
      else
        local += e.cost.row(x[e.i]).transpose();
    }
    return local;
  };
  for (int sweep = 0; sweep < 20; ++sweep) {
    bool changed = false;
    for (int k = 0; k < static_cast<int>(mrf.edges().size()); ++k) {
      const auto& e = mrf.edges()[k];
      const Eigen::MatrixXd table =
          e.cost + conditional(e.i, k).replicate(1, e.cost.cols()) +
          conditional(e.j, k).transpose().replicate(e.cost.rows(), 1);
      Eigen::Index bi, bj;
      const double best = table.minCoeff(&bi, &bj);
      if (best < table(x[e.i], x[e.j]) - 1e-15 * (1.0 + std::abs(best))) {
        x[e.i] = static_cast<int>(bi);
        x[e.j] = static_cast<int>(bj);
        changed = true;
      }
    }
    if (!changed) break;
  }
}

}  // namespace detail

/// Runs TRW-S. The returned labeling never has higher energy than `initial`
/// (all zeros when empty).
inline TrwsResult trws(const PairwiseMrf& mrf, const TrwsOptions& options = {},
                       std::vector<int> initial = {}) {
  const int n = mrf.num_nodes();
  TrwsResult result;
  if (n == 0) {
    result.lower_bound = 0.0;
    return result;
  }
  if (initial.empty()) initial.assign(n, 0);
  if (static_cast<int>(initial.size()) != n) throw InputError("initial labeling has the wrong size");
  for (int s = 0; s < n; ++s)
    if (initial[s] < 0 || initial[s] >= mrf.labels(s)) throw InputError("initial label out of range");

  const auto& edges = mrf.edges();
  std::vector<std::vector<detail::TrwsAdjacency>> lower(n), higher(n), adj(n);
  for (int e = 0; e < static_cast<int>(edges.size()); ++e) {
    higher[edges[e].i].push_back({e, edges[e].j});
    lower[edges[e].j].push_back({e, edges[e].i});
    adj[edges[e].i].push_back({e, edges[e].j});
    adj[edges[e].j].push_back({e, edges[e].i});
  }
  std::vector<double> rho(n);
  for (int s = 0; s < n; ++s)
    rho[s] = double(std::max<std::size_t>({lower[s].size(), higher[s].size(), 1}));

  // to_j[e]: message from i to j (indexed by labels of j); to_i[e]: j to i.
  std::vector<Eigen::VectorXd> to_j(edges.size()), to_i(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    to_j[e] = Eigen::VectorXd::Zero(mrf.labels(edges[e].j));
    to_i[e] = Eigen::VectorXd::Zero(mrf.labels(edges[e].i));
  }
  auto incoming = [&](int s) {
    Eigen::VectorXd theta = mrf.unary(s);
    for (const auto& a : adj[s]) theta += edges[a.edge].i == s ? to_i[a.edge] : to_j[a.edge];
    return theta;
  };
  auto send = [&](int s, const detail::TrwsAdjacency& a, const Eigen::VectorXd& theta_hat) {
    const auto& e = edges[a.edge];
    const bool s_is_i = e.i == s;
    const Eigen::VectorXd& back = s_is_i ? to_i[a.edge] : to_j[a.edge];
    const Eigen::VectorXd base = theta_hat / rho[s] - back;
    const int lt = mrf.labels(a.other);
    Eigen::VectorXd msg(lt);
    for (int xt = 0; xt < lt; ++xt) {
      if (s_is_i)
        msg(xt) = (base + e.cost.col(xt)).minCoeff();
      else
        msg(xt) = (base + e.cost.row(xt).transpose()).minCoeff();
    }
    msg.array() -= msg.minCoeff();
    (s_is_i ? to_j[a.edge] : to_i[a.edge]) = msg;
  };

  // Monotone chains: the k-th lower edge of a node continues into its k-th
  // higher edge; surplus higher edges start new chains.
  struct Chain {
    std::vector<int> nodes;
    std::vector<int> edges;
  };
  std::vector<Chain> chains;
  for (int s = 0; s < n; ++s) {
    if (lower[s].empty() && higher[s].empty()) chains.push_back({{s}, {}});
    for (std::size_t k = lower[s].size(); k < higher[s].size(); ++k) {
      Chain c{{s}, {}};
      int node = s;
      detail::TrwsAdjacency step = higher[s][k];
      while (true) {
        c.edges.push_back(step.edge);
        c.nodes.push_back(step.other);
        const int prev_edge = step.edge;
        node = step.other;
        const auto& in = lower[node];
        const auto pos = std::find_if(in.begin(), in.end(),
                                      [&](const auto& a) { return a.edge == prev_edge; }) -
                         in.begin();
        if (pos >= static_cast<long>(higher[node].size())) break;
        step = higher[node][pos];
      }
      chains.push_back(std::move(c));
    }
  }

  auto lower_bound = [&]() {
    std::vector<Eigen::VectorXd> theta_bar(n);
    for (int s = 0; s < n; ++s) theta_bar[s] = incoming(s);
    double bound = 0.0;
    for (const auto& c : chains) {
      Eigen::VectorXd acc = theta_bar[c.nodes[0]] / rho[c.nodes[0]];
      for (std::size_t k = 0; k < c.edges.size(); ++k) {
        const auto& e = edges[c.edges[k]];
        const int from = c.nodes[k], to = c.nodes[k + 1];
        // Reparameterized edge: cost - message_to(from) - message_to(to).
        const bool from_is_i = e.i == from;
        const Eigen::VectorXd& m_from = from_is_i ? to_i[c.edges[k]] : to_j[c.edges[k]];
        const Eigen::VectorXd& m_to = from_is_i ? to_j[c.edges[k]] : to_i[c.edges[k]];
        Eigen::VectorXd next(mrf.labels(to));
        for (int xt = 0; xt < mrf.labels(to); ++xt) {
          const Eigen::VectorXd col = from_is_i ? Eigen::VectorXd(e.cost.col(xt))
                                                : Eigen::VectorXd(e.cost.row(xt).transpose());
          next(xt) = (acc + col - m_from).minCoeff() - m_to(xt);
        }
        acc = next + theta_bar[to] / rho[to];
      }
      bound += acc.minCoeff();
    }
    return bound;
  };

  auto decode = [&]() {
    std::vector<int> x(n, 0);
    for (int s = 0; s < n; ++s) {
      Eigen::VectorXd local = mrf.unary(s);
      for (const auto& a : lower[s]) local += edges[a.edge].cost.row(x[a.other]).transpose();
      for (const auto& a : higher[s]) local += to_i[a.edge];
      Eigen::Index best;
      local.minCoeff(&best);
      x[s] = static_cast<int>(best);
    }
    return x;
  };
  // Same, sweeping from the last node down after a backward pass.
  auto decode_reverse = [&]() {
    std::vector<int> x(n, 0);
    for (int s = n - 1; s >= 0; --s) {
      Eigen::VectorXd local = mrf.unary(s);
      for (const auto& a : higher[s]) local += edges[a.edge].cost.col(x[a.other]);
      for (const auto& a : lower[s]) local += to_j[a.edge];
      Eigen::Index best;
      local.minCoeff(&best);
      x[s] = static_cast<int>(best);
    }
    return x;
  };
  auto consider = [&](std::vector<int> x) {
    if (options.polish) detail::icm_polish(mrf, adj, x);
    const double e = mrf.energy(x);
    if (e < result.energy) {
      result.energy = e;
      result.labeling = std::move(x);
    }
  };

  result.labeling = initial;
  result.energy = mrf.energy(initial);
  for (int it = 0; it < options.max_iterations; ++it) {
    for (int s = 0; s < n; ++s) {
      const Eigen::VectorXd theta_hat = incoming(s);
      for (const auto& a : higher[s]) send(s, a, theta_hat);
    }
    for (int s = n - 1; s >= 0; --s) {
      const Eigen::VectorXd theta_hat = incoming(s);
      for (const auto& a : lower[s]) send(s, a, theta_hat);
    }
    result.iterations = it + 1;
    const double bound = lower_bound();
    result.bound_history.push_back(bound);
    consider(decode());
    consider(decode_reverse());
    const double prev = result.bound_history.size() > 1
                            ? result.bound_history[result.bound_history.size() - 2]
                            : -std::numeric_limits<double>::infinity();
    result.lower_bound = std::max(result.lower_bound, bound);
    const double scale = 1.0 + std::abs(bound);
    if (result.energy - result.lower_bound <= 1e-12 * scale) break;  // certified optimal
    if (bound - prev <= options.bound_tolerance * scale && it > 2) break;
  }
  if (options.polish && result.energy - result.lower_bound > 1e-12 * (1.0 + std::abs(result.lower_bound))) {
    std::vector<int> x = result.labeling;
    detail::edge_polish(mrf, adj, x);
    consider(std::move(x));
  }
  return result;
}

}  // namespace sps
