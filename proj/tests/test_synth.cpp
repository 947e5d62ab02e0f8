#include <gtest/gtest.h>

#include <cmath>

#include "sps/synth.hpp"
#include "test_util.hpp"

using namespace sps;

namespace {

std::vector<Vector2d> rect(double u0, double v0, double u1, double v1) {
  return {{u0, v0}, {u1, v0}, {u1, v1}, {u0, v1}};
}

SceneSpec single_plane(const Vector3d& t, int w = 40, int h = 30) {
  SceneSpec s;
  s.width = w;
  s.height = h;
  s.intrinsics = Intrinsics(50, 50, (w - 1) / 2.0, (h - 1) / 2.0);
  s.motions = {{Rotation(), t}};
  PlaneSpec p;
  p.normal = Vector3d(0, 0, -1);
  p.depth = 2.0;
  p.polygon = rect(-1, -1, w, h);
  s.planes = {p};
  return s;
}

// Wall + floor share the camera-induced motion; a tilted panel moves on its own.
SceneSpec three_plane() {
  SceneSpec s;
  s.width = 96;
  s.height = 72;
  s.intrinsics = Intrinsics(100, 100, 48, 36);
  s.motions = {{Rotation::axis_angle(Vector3d(0, 1, 0), deg2rad(2)), Vector3d(0.08, 0.0, -0.05)},
               {Rotation::axis_angle(Vector3d(0.2, 1, 0), deg2rad(-4)), Vector3d(-0.06, 0.02, 0.03)}};
  PlaneSpec wall{Vector3d(0, 0, -1), 5.0, rect(-1, -1, 96, 72), 0, Vector3d(0.6, 0.5, 0.4)};
  PlaneSpec floor{Vector3d(0, -1, -0.3).normalized(), 1.2, rect(-1, 50, 96, 72), 0,
                  Vector3d(0.3, 0.5, 0.3)};
  PlaneSpec panel{Vector3d(0.3, 0.1, -1).normalized(), 3.0, rect(30, 15, 65, 45), 1,
                  Vector3d(0.8, 0.3, 0.3)};
  s.planes = {wall, floor, panel};
  return s;
}

}  // namespace

TEST(Render, StaticFrontoParallelPlane) {
  const GroundTruth gt = render(single_plane(Vector3d::Zero()));
  for (int v = 0; v < 30; ++v)
    for (int u = 0; u < 40; ++u) {
      EXPECT_FLOAT_EQ(gt.depth(u, v), 2.f);
      EXPECT_EQ(gt.flow.du(u, v), 0.f);
      EXPECT_EQ(gt.flow.dv(u, v), 0.f);
      EXPECT_EQ(gt.labels(u, v), 0);
      EXPECT_EQ(gt.occluded(u, v), 0);
      // No motion: both frames show the same texture.
      EXPECT_EQ(gt.frame1(u, v), gt.frame2(u, v));
    }
}

TEST(Render, ForwardMotionIsRadial) {
  // Odd image so the principal point is a pixel center.
  const SceneSpec spec = single_plane(Vector3d(0, 0, -0.1), 41, 31);
  const GroundTruth gt = render(spec);
  EXPECT_NEAR(gt.flow.du(20, 15), 0.f, 1e-6);
  EXPECT_NEAR(gt.flow.dv(20, 15), 0.f, 1e-6);
  for (int v = 0; v < 31; ++v)
    for (int u = 0; u < 41; ++u) {
      const Vector2d r(u - 20.0, v - 15.0);
      const Vector2d f(gt.flow.du(u, v), gt.flow.dv(u, v));
      // Approaching plane: every pixel moves outward by r * 0.1 / 1.9.
      EXPECT_NEAR((f - r * (0.1 / 1.9)).norm(), 0.0, 1e-5);
    }
}

TEST(Render, FlowMatchesPlaneHomographies) {
  const SceneSpec spec = three_plane();
  const GroundTruth gt = render(spec);
  int counts[3] = {0, 0, 0};
  for (int v = 0; v < spec.height; ++v)
    for (int u = 0; u < spec.width; ++u) {
      const int p = gt.labels(u, v);
      ++counts[p];
      const auto& m = spec.motions[spec.planes[p].motion];
      const Homography h = homography_from_motion_plane(spec.intrinsics, m.rotation,
                                                        m.translation, spec.planes[p].plane());
      const Vector2d x(u, v);
      const Vector2d via_h = h.apply(x);
      EXPECT_LT((point_transfer(spec, p, x) - via_h).norm(), 1e-9);
      const Vector2d stored(gt.flow.du(u, v), gt.flow.dv(u, v));
      EXPECT_LT((x + stored - via_h).norm(), 1e-4);  // float32 storage
    }
  for (int c : counts) EXPECT_GT(c, 100);
}

TEST(Render, DepthFlowConsistency) {
  const SceneSpec spec = three_plane();
  const GroundTruth gt = render(spec);
  for (int v = 0; v < spec.height; v += 3)
    for (int u = 0; u < spec.width; u += 3) {
      const auto& ps = spec.planes[gt.labels(u, v)];
      const auto& m = spec.motions[ps.motion];
      const Vector3d x = testutil::ray_plane(spec.intrinsics, Vector2d(u, v), ps.normal, ps.depth);
      EXPECT_NEAR(x.z(), gt.depth(u, v), 1e-5 * x.z());
      const Vector3d x2 = m.rotation * x + m.translation;
      EXPECT_NEAR(x2.z(), gt.depth_next(u, v), 1e-5 * x2.z());
      const double pu = spec.intrinsics.fx * x2.x() / x2.z() + spec.intrinsics.cx;
      const double pv = spec.intrinsics.fy * x2.y() / x2.z() + spec.intrinsics.cy;
      EXPECT_NEAR(pu - u, gt.flow.du(u, v), 1e-4);
      EXPECT_NEAR(pv - v, gt.flow.dv(u, v), 1e-4);
    }
}

TEST(Render, OcclusionBandBehindMovingPanel) {
  // Panel at depth 1 slides 5 px right (0.1 m at f=50) over a static wall.
  SceneSpec s = single_plane(Vector3d::Zero(), 60, 40);
  s.motions.push_back({Rotation(), Vector3d(0.1, 0, 0)});
  s.planes[0].depth = 4.0;
  PlaneSpec panel{Vector3d(0, 0, -1), 1.0, rect(19.5, 9.5, 39.5, 29.5), 1, Vector3d(0.9, 0.1, 0.1)};
  s.planes.push_back(panel);
  const GroundTruth gt = render(s);
  // Wall columns 40..44 inside the panel's rows are covered after the move.
  int occluded = 0;
  for (int v = 0; v < 40; ++v)
    for (int u = 0; u < 60; ++u) {
      const bool expect = gt.labels(u, v) == 0 && v >= 10 && v <= 29 && u >= 40 && u <= 44;
      EXPECT_EQ(bool(gt.occluded(u, v)), expect) << u << "," << v;
      occluded += gt.occluded(u, v);
    }
  EXPECT_EQ(occluded, 5 * 20);
  const DepthMap d = evaluation_depth(gt);
  EXPECT_TRUE(std::isnan(d(42, 20)));
  EXPECT_FALSE(std::isnan(d(30, 20)));
  // The panel texture reappears 5 px to the right in the next frame.
  EXPECT_EQ(gt.frame2(30, 20), gt.frame1(25, 20));
}

TEST(Render, UncoveredPixelIsAnError) {
  SceneSpec s = single_plane(Vector3d::Zero());
  s.planes[0].polygon = rect(-1, -1, 20, 30);
  EXPECT_THROW(render(s), InputError);
}

TEST(Render, PlaneBehindCameraInNextFrameIsAnError) {
  EXPECT_THROW(render(single_plane(Vector3d(0, 0, -2.5))), InputError);
}

TEST(Perturb, ZeroNoiseAndDeterminism) {
  const GroundTruth gt = render(three_plane());
  const FlowField same = perturb(gt.flow, 0.0, 3);
  for (int v = 0; v < gt.flow.height(); ++v)
    for (int u = 0; u < gt.flow.width(); ++u) EXPECT_EQ(same.du(u, v), gt.flow.du(u, v));
  const FlowField a = perturb(gt.flow, 0.2, 11), b = perturb(gt.flow, 0.2, 11);
  for (int v = 0; v < gt.flow.height(); ++v)
    for (int u = 0; u < gt.flow.width(); ++u) {
      EXPECT_EQ(a.du(u, v), b.du(u, v));
      EXPECT_EQ(a.dv(u, v), b.dv(u, v));
    }
}

TEST(Perturb, EmpiricalStandardDeviation) {
  const FlowField zero(120, 100);
  const FlowField noisy = perturb(zero, 0.2, 5);
  double sum = 0, sq = 0;
  long n = 0;
  for (int v = 0; v < 100; ++v)
    for (int u = 0; u < 120; ++u)
      for (double x : {double(noisy.du(u, v)), double(noisy.dv(u, v))}) {
        sum += x;
        sq += x * x;
        ++n;
      }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(sd, 0.2, 0.2 * 0.05);
  EXPECT_THROW(perturb(zero, -1.0, 0), InputError);
}

TEST(SceneSpecJson, ParsesAndReportsPointers) {
  const nlohmann::json good = {
      {"width", 16}, {"height", 12},
      {"intrinsics", {{"fx", 20}, {"fy", 20}, {"cx", 8}, {"cy", 6}}},
      {"motions", {{{"rotation", {0, 0.01, 0}}, {"translation", {0.1, 0, 0}}}}},
      {"planes", {{{"normal", {0, 0, -2}}, {"depth", 3}, {"motion", 0},
                   {"polygon", {{-1, -1}, {16, -1}, {16, 12}, {-1, 12}}}}}}};
  const SceneSpec s = scene_spec_from_json(good);
  EXPECT_EQ(s.planes.size(), 1u);
  EXPECT_NEAR(s.planes[0].normal.norm(), 1.0, 1e-12);
  EXPECT_NEAR(s.motions[0].rotation.angle(), 0.01, 1e-12);

  auto message = [](nlohmann::json j) {
    try {
      scene_spec_from_json(j);
    } catch (const InputError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  nlohmann::json bad = good;
  bad["planes"][0]["normal"] = {0, "x", 1};
  EXPECT_NE(message(bad).find("/planes/0/normal/1"), std::string::npos) << message(bad);
  bad = good;
  bad["planes"][0]["motion"] = 3;
  EXPECT_NE(message(bad).find("/planes/0/motion"), std::string::npos);
  bad = good;
  bad.erase("intrinsics");
  EXPECT_NE(message(bad).find("/intrinsics"), std::string::npos);
  bad = good;
  bad["planes"][0]["polygon"][2] = {1};
  EXPECT_NE(message(bad).find("/planes/0/polygon/2"), std::string::npos);
}

TEST(Cylinder, FacetsFaceTheCameraAndCoverTheArc) {
  const Intrinsics k(100, 100, 64, 48);
  for (int n : {8, 16, 32}) {
    const auto facets = cylinder_facets(k, Vector3d(0, 0, 4), 1.0, -0.8, 0.8, deg2rad(-60),
                                        deg2rad(60), n, 0, Vector3d(0.5, 0.5, 0.5));
    ASSERT_EQ(static_cast<int>(facets.size()), n);
    for (const auto& f : facets) {
      EXPECT_GT(f.depth, 0.0);
      EXPECT_LT(f.normal.z(), 0.0);
      // Facet planes are tangent-ish: distance from axis below the radius.
      const double dist_axis = std::abs(f.normal.dot(Vector3d(0, 0, 4)) + f.depth);
      EXPECT_LE(dist_axis, 1.0 + 1e-12);
      EXPECT_GE(dist_axis, std::cos(deg2rad(60.0) / n) - 1e-12);
    }
    // Back-to-front ordering.
    for (std::size_t i = 1; i < facets.size(); ++i) {
      auto zc = [&](const PlaneSpec& f) {
        Vector2d c = Vector2d::Zero();
        for (const auto& p : f.polygon) c += p / 4.0;
        return backproject(k, c, f.plane()).z();
      };
      EXPECT_GE(zc(facets[i - 1]) + 1e-2, zc(facets[i]));
    }
  }
}
