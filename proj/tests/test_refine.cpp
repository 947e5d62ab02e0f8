#include <gtest/gtest.h>

#include <random>

#include "sps/pipeline.hpp"
#include "sps/synth.hpp"

using namespace sps;

namespace {

struct Oracle {
  SceneSpec spec;
  GroundTruth gt;
  Reconstruction rec;
};

Oracle oracle(int superpixels) {
  Oracle o;
  o.spec = read_scene_spec(std::string(SPS_SOURCE_DIR) + "/scenes/threeplane.json");
  o.gt = render(o.spec);
  PipelineConfig cfg;
  cfg.n_superpixels = superpixels;
  cfg.knn_K = 8;
  cfg.refine_iters = 0;
  o.rec = reconstruct({o.gt.frame1, o.gt.flow, o.spec.intrinsics, {}}, cfg);
  return o;
}

// Tilts every plane by `deg` about a random axis through its anchor point.
void tilt_planes(const SceneContext& ctx, SceneState& st, double deg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < ctx.size(); ++i) {
    auto& p = st.patches[i];
    const Vector3d x = -p.plane.depth / p.plane.normal.dot(ctx.anchor_rays[i]) * ctx.anchor_rays[i];
    // Grazing planes (the floor) can tip behind the camera; draw again.
    for (int attempt = 0; attempt < 100; ++attempt) {
      Vector3d axis(g(rng), g(rng), g(rng));
      axis -= axis.dot(p.plane.normal) * p.plane.normal;
      const Vector3d n = (Rotation::axis_angle(axis, deg2rad(deg)) * p.plane.normal).normalized();
      if (-n.dot(x) > 1e-6) {
        p.plane = Plane(n, -n.dot(x));
        break;
      }
    }
  }
}

// Mean normal error over superpixels lying on a single ground-truth plane.
double mean_normal_error_deg(const Oracle& o, const SceneState& st) {
  double sum = 0;
  int n = 0;
  for (int i = 0; i < o.rec.ctx.size(); ++i) {
    std::vector<int> votes(o.spec.planes.size(), 0);
    for (const auto& px : o.rec.ctx.superpixels[i].pixels) ++votes[o.gt.labels(px)];
    const int pl = int(std::max_element(votes.begin(), votes.end()) - votes.begin());
    if (votes[pl] != int(o.rec.ctx.superpixels[i].pixels.size())) continue;
    sum += angle_between(st.patches[i].plane.normal, o.spec.planes[pl].normal) * 180.0 / M_PI;
    ++n;
  }
  return sum / n;
}

}  // namespace

TEST(Refine, EnergyNeverIncreasesOnSeededRuns) {
  const Oracle o = oracle(60);
  const EnergyParams prm;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneState st = o.rec.state;
    tilt_planes(o.rec.ctx, st, 10.0, seed);
    RefineOptions opt;
    opt.iterations = 3;
    opt.particles = 8;
    opt.seed = seed;
    const auto r = refine(o.rec.ctx, st, prm, opt);
    ASSERT_EQ(r.energy_history.size(), 4u);
    for (std::size_t k = 1; k < r.energy_history.size(); ++k)
      EXPECT_LE(r.energy_history[k], r.energy_history[k - 1] * (1 + 1e-12)) << "seed " << seed;
    EXPECT_NEAR(r.energy_history.back(), e_total(o.rec.ctx, st, prm).total, 1e-9);
  }
}

TEST(Refine, TiltedNormalsRecover) {
  const Oracle o = oracle(300);
  SceneState st = o.rec.state;
  tilt_planes(o.rec.ctx, st, 15.0, 1);
  const double before = mean_normal_error_deg(o, st);
  EXPECT_GT(before, 10.0);
  RefineOptions opt;
  opt.iterations = 10;
  opt.particles = 20;
  refine(o.rec.ctx, st, EnergyParams{}, opt);
  EXPECT_LT(mean_normal_error_deg(o, st), 3.0) << "before " << before;
}

TEST(Refine, SingleParticleKeepsState) {
  const Oracle o = oracle(60);
  SceneState st = o.rec.state;
  RefineOptions opt;
  opt.iterations = 2;
  opt.particles = 1;
  const auto r = refine(o.rec.ctx, st, EnergyParams{}, opt);
  EXPECT_EQ(r.changed, (std::vector<int>{0, 0}));
  EXPECT_DOUBLE_EQ(r.energy_history.front(), r.energy_history.back());
}

TEST(Refine, RejectsMismatchedState) {
  const Oracle o = oracle(60);
  SceneState st = o.rec.state;
  st.patches.pop_back();
  EXPECT_THROW(refine(o.rec.ctx, st, EnergyParams{}), InputError);
}
