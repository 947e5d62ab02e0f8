#pragma once

// Superpixel bookkeeping over the reference image: member pixels, boundary
// pixels, anchors, the K-NN anchor graph and pixel-level boundary adjacency.

#include <algorithm>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "sps/errors.hpp"
#include "sps/geometry.hpp"
#include "sps/image.hpp"

namespace sps {

struct Superpixel {
  int id = 0;
  std::vector<PixelCoord> pixels;    // scan order
  std::vector<PixelCoord> boundary;  // members with a 4-neighbour outside
  Vector2d centroid = Vector2d::Zero();
  PixelCoord anchor;                 // member pixel nearest the centroid
  Eigen::Vector3d mean_color = Eigen::Vector3d::Zero();

  std::size_t size() const { return pixels.size(); }
  Vector2d anchor_px() const { return {double(anchor.u), double(anchor.v)}; }
};

/// Two 4-adjacent pixels on either side of a superpixel border.
struct BoundaryPair {
  int sp_a = 0;
  PixelCoord px_a;
  int sp_b = 0;
  PixelCoord px_b;

  /// Point halfway between the two pixel centers, on the shared edge.
  Vector2d midpoint() const {
    return {0.5 * (px_a.u + px_b.u), 0.5 * (px_a.v + px_b.v)};
  }
  friend bool operator==(const BoundaryPair&, const BoundaryPair&) = default;
};

/// Directed K-NN adjacency: knn[i] lists the neighbours of node i, nearest
/// first.
using KnnGraph = std::vector<std::vector<int>>;

struct SceneGraph {
  std::vector<Superpixel> superpixels;
  KnnGraph knn;
  std::vector<BoundaryPair> boundary_pairs;  // both orientations present

  int size() const { return static_cast<int>(superpixels.size()); }
};

inline std::vector<Superpixel> build_superpixels(const LabelMap& labels,
                                                 const ColorImage& image) {
  if (labels.width() != image.width() || labels.height() != image.height())
    throw InputError("label map and image sizes differ");
  int max_id = -1;
  for (auto id : labels.data()) {
    if (id < 0) throw InputError("negative label id");
    max_id = std::max(max_id, id);
  }
  std::vector<Superpixel> sps(static_cast<std::size_t>(max_id) + 1);
  for (int v = 0; v < labels.height(); ++v)
    for (int u = 0; u < labels.width(); ++u) sps[labels(u, v)].pixels.push_back({u, v});

  for (std::size_t i = 0; i < sps.size(); ++i) {
    Superpixel& sp = sps[i];
    if (sp.pixels.empty())
      throw InputError("label ids are not contiguous: id " + std::to_string(i) + " is empty");
    sp.id = static_cast<int>(i);
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    for (const auto& p : sp.pixels) {
      sp.centroid += Vector2d(p.u, p.v);
      color += image(p).cast<double>();
      bool frontier = false;
      const PixelCoord nb[4] = {{p.u - 1, p.v}, {p.u + 1, p.v}, {p.u, p.v - 1}, {p.u, p.v + 1}};
      for (const auto& q : nb)
        if (!labels.contains(q.u, q.v) || labels(q) != sp.id) frontier = true;
      if (frontier) sp.boundary.push_back(p);
    }
    sp.centroid /= double(sp.pixels.size());
    sp.mean_color = color / double(sp.pixels.size());
    double best = 1e300;
    for (const auto& p : sp.pixels) {
      const double d = (Vector2d(p.u, p.v) - sp.centroid).squaredNorm();
      if (d < best) {
        best = d;
        sp.anchor = p;
      }
    }
  }
  return sps;
}

/// K nearest other anchors per node by Euclidean distance, ties broken by
/// lower index. With N <= K every node links to all N-1 others.
inline KnnGraph build_knn_graph(std::span<const Vector3d> anchors, int k) {
  const int n = static_cast<int>(anchors.size());
  if (n < 2) throw InputError("knn graph needs at least two anchors");
  if (k < 1) throw InputError("knn graph needs K >= 1");
  const int kk = std::min(k, n - 1);
  KnnGraph graph(n);
  std::vector<std::pair<double, int>> dist(n);
  for (int i = 0; i < n; ++i) {
    dist.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) dist.emplace_back((anchors[i] - anchors[j]).squaredNorm(), j);
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    graph[i].reserve(kk);
    for (int j = 0; j < kk; ++j) graph[i].push_back(dist[j].second);
  }
  return graph;
}

inline std::vector<BoundaryPair> boundary_adjacency(const std::vector<Superpixel>& sps) {
  if (sps.empty()) return {};
  int w = 0, h = 0;
  for (const auto& sp : sps)
    for (const auto& p : sp.boundary) {
      w = std::max(w, p.u + 1);
      h = std::max(h, p.v + 1);
    }
  // Only boundary pixels need labels: any pixel whose 4-neighbour carries a
  // different label is on its superpixel's boundary list.
  LabelMap owner(w, h, -1);
  for (const auto& sp : sps)
    for (const auto& p : sp.boundary) owner(p) = sp.id;
  std::vector<BoundaryPair> pairs;
  for (const auto& sp : sps)
    for (const auto& p : sp.boundary) {
      const PixelCoord nb[4] = {{p.u - 1, p.v}, {p.u + 1, p.v}, {p.u, p.v - 1}, {p.u, p.v + 1}};
      for (const auto& q : nb)
        if (owner.contains(q.u, q.v) && owner(q) >= 0 && owner(q) != sp.id)
          pairs.push_back({sp.id, p, owner(q), q});
    }
  return pairs;
}

/// Connectivity of the undirected version of `graph`, restricted to nodes
/// with active[i] set (all nodes when `active` is empty).
inline bool is_connected(const KnnGraph& graph, const std::vector<bool>& active = {}) {
  const int n = static_cast<int>(graph.size());
  auto on = [&](int i) { return active.empty() || active[i]; };
  std::vector<std::vector<int>> undirected(n);
  for (int i = 0; i < n; ++i)
    for (int j : graph[i])
      if (on(i) && on(j)) {
        undirected[i].push_back(j);
        undirected[j].push_back(i);
      }
  int start = -1, count = 0;
  for (int i = 0; i < n; ++i)
    if (on(i)) {
      if (start < 0) start = i;
      ++count;
    }
  if (count <= 1) return true;
  std::vector<bool> seen(n, false);
  std::vector<int> stack = {start};
  seen[start] = true;
  int reached = 1;
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    for (int j : undirected[i])
      if (!seen[j]) {
        seen[j] = true;
        ++reached;
        stack.push_back(j);
      }
  }
  return reached == count;
}

}  // namespace sps
