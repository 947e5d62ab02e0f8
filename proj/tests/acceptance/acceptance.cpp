// Acceptance suite: one PASS/FAIL line per criterion on stdout, exit code 1
// if any criterion fails. Each criterion runs against an independent oracle
// (ground-truth renders, brute-force evaluators, exhaustive enumeration).

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <string>

#include "oracles/energy_oracle.hpp"
#include "oracles/mrf_oracle.hpp"
#include "sps/sps.hpp"
#include "test_util.hpp"

using namespace sps;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

SceneSpec load_scene(const char* name) {
  return read_scene_spec(std::string(SPS_SOURCE_DIR) + "/scenes/" + name);
}

PipelineConfig oracle_config() {
  PipelineConfig c;
  c.n_superpixels = 300;
  c.knn_K = 8;
  return c;
}

// ---------------------------------------------------------------------------

Outcome oracle_reconstruction() {
  const SceneSpec spec = load_scene("threeplane.json");
  const GroundTruth gt = render(spec);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rec = reconstruct({gt.frame1, gt.flow, spec.intrinsics, {}}, oracle_config());
  const auto rep = evaluate_depth(rec.depth(), evaluation_depth(gt));
  const double sec = seconds_since(t0);
  bool monotone = true;
  for (std::size_t k = 1; k < rec.report.energy_refine.size(); ++k)
    monotone = monotone && rec.report.energy_refine[k] <= rec.report.energy_refine[k - 1];
  return {rep.mre < 0.01 && sec < 60.0 && monotone,
          fmt("MRE %.5f (< 0.01), %.1f s (< 60 s), %d superpixels, refine energy %s", rep.mre, sec,
              rec.ctx.size(), monotone ? "monotone" : "NOT monotone")};
}

Outcome scale_recovery() {
  // One slanted plane under one rigid motion, cut into n vertical strips.
  SceneSpec spec;
  spec.width = 120;
  spec.height = 80;
  spec.intrinsics = Intrinsics(150, 150, 60, 40);
  spec.motions.push_back({Rotation::axis_angle(Vector3d(0.2, 1, 0.1), deg2rad(3)), Vector3d(0.3, 0.05, -0.2)});
  PlaneSpec plane;
  plane.normal = Vector3d(0.3, 0.15, -1).normalized();
  plane.depth = 4.0;
  plane.polygon = {{-1, -1}, {121, -1}, {121, 81}, {-1, 81}};
  spec.planes.push_back(plane);
  const GroundTruth gt = render(spec);

  double worst = 0;
  Reconstruction two;
  for (int n = 2; n <= 10; ++n) {
    LabelMap labels(spec.width, spec.height);
    for (int v = 0; v < spec.height; ++v)
      for (int u = 0; u < spec.width; ++u) labels(u, v) = u * n / spec.width;
    PipelineConfig cfg;
    cfg.knn_K = std::min(4, n - 1);
    cfg.refine_iters = 0;
    auto rec = reconstruct({gt.frame1, gt.flow, spec.intrinsics, labels}, cfg);
    // Ground truth: every strip moves with the same translation, so all
    // unit-gauge scales are equal.
    for (int i = 1; i < n; ++i)
      worst = std::max(worst, std::abs(rec.state.patches[i].lambda / rec.state.patches[0].lambda - 1.0));
    if (n == 2) two = std::move(rec);
  }

  // Simplex grid search at 1e-4 on the 2-patch case, rigid and with the
  // second patch's motion replaced (non-trivial optimum).
  double grid_gap = 0;
  std::mt19937 rng(3);
  for (int variant = 0; variant < 4; ++variant) {
    SceneState st = two.state;
    if (variant > 0) {
      auto [r, t, unused] = testutil::random_motion_plane(rng);
      (void)unused;
      st.patches[1].rotation = r;
      st.patches[1].t_dir = t.normalized();
    }
    const EnergyParams prm;
    double best = 1e300, best_l = 0;
    for (int g = 1; g < 10000; ++g) {
      st.patches[0].lambda = g * 1e-4;
      st.patches[1].lambda = 1 - g * 1e-4;
      const double e = e_arap(two.ctx, st, prm);
      if (e < best) {
        best = e;
        best_l = g * 1e-4;
      }
    }
    const auto sol = solve_scales(two.ctx, st, prm);
    grid_gap = std::max(grid_gap, std::abs(sol.lambda[0] - best_l));
    if (sol.energy > best + 1e-12) grid_gap = std::max(grid_gap, 1.0);
  }
  return {worst < 1e-3 && grid_gap <= 1e-4,
          fmt("max scale-ratio error %.2e over n=2..10 (< 1e-3); 2-patch |lambda - grid| %.2e (<= 1e-4)", worst,
              grid_gap)};
}

Outcome homography_round_trip() {
  std::mt19937 rng(1000);
  std::uniform_real_distribution<double> f(100, 1000), c(0, 500);
  double worst_r = 0, worst_n = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Intrinsics k(f(rng), f(rng), c(rng), c(rng));
    const auto [r, t, plane] = testutil::random_motion_plane(rng);
    const auto cands = decompose_homography(homography_from_motion_plane(k, r, t, plane), k);
    const auto best = testutil::closest_candidate(cands, r, t.normalized(), plane.normal);
    worst_r = std::max(worst_r, geodesic_distance(best.rotation, r));
    worst_n = std::max(worst_n, angle_between(best.normal, plane.normal));
  }
  return {worst_r < 1e-6 && worst_n < 1e-6,
          fmt("1000 draws: max rotation error %.2e rad, max normal error %.2e rad (< 1e-6)", worst_r, worst_n)};
}

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

Outcome energy_oracle() {
  std::mt19937 rng(4);
  double worst[3] = {0, 0, 0};
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = oracle::random_scene(rng, 2 + trial % 9);
    const auto e = e_total(s.ctx, s.state, s.prm);
    worst[0] = std::max(worst[0], rel(e.arap, oracle::brute_arap(s)));
    worst[1] = std::max(worst[1], rel(e.proj, oracle::brute_proj(s)));
    worst[2] = std::max(worst[2], rel(e.cont, oracle::brute_cont(s)));
  }
  return {worst[0] < 1e-9 && worst[1] < 1e-9 && worst[2] < 1e-9,
          fmt("50 scenes: max error arap %.1e, proj %.1e, cont %.1e (< 1e-9)", worst[0], worst[1], worst[2])};
}

Outcome projection_scale_invariance() {
  std::mt19937 rng(5);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = oracle::random_scene(rng, 2 + trial % 9);
    const double base = e_proj(s.ctx, s.state);
    for (double c : {0.1, 1.0, 10.0}) {
      SceneState scaled = s.state;
      for (auto& p : scaled.patches) p.lambda *= c;
      worst = std::max(worst, std::abs(e_proj(s.ctx, scaled) - base) / base);
    }
  }
  return {worst < 1e-12, fmt("max relative change %.1e over 50 scenes (< 1e-12)", worst)};
}

Outcome trws_correctness() {
  std::mt19937 rng(6);
  std::uniform_int_distribution<int> nodes(1, 6);
  double worst_gap = 0;
  bool monotone = true;
  for (int trial = 0; trial < 200; ++trial) {
    const PairwiseMrf mrf = oracle::random_mrf(rng, nodes(rng), 4, 0.6);
    const auto r = trws(mrf);
    worst_gap = std::max(worst_gap, r.energy - oracle::brute_force_min(mrf));
    for (std::size_t k = 1; k < r.bound_history.size(); ++k)
      monotone = monotone && r.bound_history[k] >= r.bound_history[k - 1] - 1e-12;
  }
  return {worst_gap < 1e-9 && monotone,
          fmt("200 graphs: max excess over enumeration %.1e (< 1e-9), lower bound %s", worst_gap,
              monotone ? "monotone" : "NOT monotone")};
}

// Tilts every plane about a random axis through its anchor point.
void tilt_planes(const SceneContext& ctx, SceneState& st, double deg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < ctx.size(); ++i) {
    auto& p = st.patches[i];
    const Vector3d x = -p.plane.depth / p.plane.normal.dot(ctx.anchor_rays[i]) * ctx.anchor_rays[i];
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

double mean_normal_error_deg(const SceneSpec& spec, const GroundTruth& gt, const SceneContext& ctx,
                             const SceneState& st) {
  double sum = 0;
  int n = 0;
  for (int i = 0; i < ctx.size(); ++i) {
    std::vector<int> votes(spec.planes.size(), 0);
    for (const auto& px : ctx.superpixels[i].pixels) ++votes[gt.labels(px)];
    const int pl = int(std::max_element(votes.begin(), votes.end()) - votes.begin());
    if (votes[pl] != int(ctx.superpixels[i].pixels.size())) continue;
    sum += angle_between(st.patches[i].plane.normal, spec.planes[pl].normal) * 180.0 / M_PI;
    ++n;
  }
  return sum / n;
}

Outcome refinement() {
  const SceneSpec spec = load_scene("threeplane.json");
  const GroundTruth gt = render(spec);
  const EnergyParams prm;

  // 20 seeded runs on a coarse segmentation.
  PipelineConfig coarse = oracle_config();
  coarse.n_superpixels = 60;
  coarse.refine_iters = 0;
  const auto small = reconstruct({gt.frame1, gt.flow, spec.intrinsics, {}}, coarse);
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneState st = small.state;
    tilt_planes(small.ctx, st, 10.0, seed);
    RefineOptions opt;
    opt.iterations = 4;
    opt.particles = 10;
    opt.seed = seed;
    const auto r = refine(small.ctx, st, prm, opt);
    for (std::size_t k = 1; k < r.energy_history.size(); ++k) violations += r.energy_history[k] > r.energy_history[k - 1];
  }

  // Recovery from 15 degree tilts on the full segmentation.
  PipelineConfig full = oracle_config();
  full.refine_iters = 0;
  const auto rec = reconstruct({gt.frame1, gt.flow, spec.intrinsics, {}}, full);
  SceneState st = rec.state;
  tilt_planes(rec.ctx, st, 15.0, 99);
  const double before = mean_normal_error_deg(spec, gt, rec.ctx, st);
  double after = before;
  int used = 0;
  for (int it = 0; it < 10 && after >= 3.0; ++it) {
    RefineOptions opt;
    opt.iterations = 1;
    opt.seed = static_cast<std::uint64_t>(it);
    const auto r = refine(rec.ctx, st, prm, opt);
    violations += r.energy_history[1] > r.energy_history[0];
    after = mean_normal_error_deg(spec, gt, rec.ctx, st);
    ++used;
  }
  return {violations == 0 && after < 3.0,
          fmt("energy increases: %d (20 seeded runs + recovery); normals %.1f -> %.2f deg in %d iterations "
              "(< 3 deg, <= 10)",
              violations, before, after, used)};
}

// Foreground MRE (pixels of planes under any motion but the first), after
// global median alignment.
double foreground_mre(const SceneSpec& spec, const GroundTruth& gt, const DepthMap& est) {
  const DepthMap gd = evaluation_depth(gt);
  const double s = align_scale(est, gd).scale;
  double sum = 0;
  long n = 0;
  for (int v = 0; v < gd.height(); ++v)
    for (int u = 0; u < gd.width(); ++u) {
      const float zg = gd(u, v), ze = est(u, v);
      if (!(zg > 0) || !(ze > 0) || spec.planes[gt.labels(u, v)].motion == 0) continue;
      sum += std::abs(zg - s * ze) / zg;
      ++n;
    }
  return n ? sum / double(n) : 0.0;
}

Outcome k_sensitivity() {
  const SceneSpec spec = load_scene("small_foreground.json");
  const GroundTruth gt = render(spec);
  PipelineConfig cfg = oracle_config();
  cfg.particles = 20;
  cfg.knn_K = 4;
  const auto small_k = reconstruct({gt.frame1, gt.flow, spec.intrinsics, {}}, cfg);
  const double mre_small = foreground_mre(spec, gt, small_k.depth());
  cfg.knn_K = (small_k.ctx.size() + 1) / 2;
  const auto large_k = reconstruct({gt.frame1, gt.flow, spec.intrinsics, {}}, cfg);
  const double mre_large = foreground_mre(spec, gt, large_k.depth());
  return {mre_small < 0.05 && mre_large >= 2.0 * mre_small,
          fmt("foreground MRE %.4f at K=4 (< 0.05), %.4f at K=%d of N=%d (ratio %.2f >= 2)", mre_small, mre_large,
              cfg.knn_K, small_k.ctx.size(), mre_large / mre_small)};
}

Outcome noise_robustness() {
  const SceneSpec spec = load_scene("threeplane.json");
  const GroundTruth gt = render(spec);
  const auto rec = reconstruct({gt.frame1, perturb(gt.flow, 0.5, 1), spec.intrinsics, {}}, oracle_config());
  const auto rep = evaluate_depth(rec.depth(), evaluation_depth(gt));
  return {rep.mre < 0.05, fmt("MRE %.4f at 0.5 px flow noise (< 0.05)", rep.mre)};
}

std::uint32_t bits(float f) {
  std::uint32_t b;
  std::memcpy(&b, &f, 4);
  return b;
}

Outcome format_round_trips() {
  const auto dir = testutil::temp_dir("acceptance_formats");
  std::mt19937 rng(10);
  std::uniform_int_distribution<int> dim(1, 64);
  auto random_bits = [&] {
    const std::uint32_t b = rng();
    float f;
    std::memcpy(&f, &b, 4);
    return f;
  };
  long flo_bad = 0, pfm_bad = 0, ply_bad = 0;
  for (int trial = 0; trial < 20; ++trial) {
    FlowField flow(dim(rng), dim(rng));
    for (int v = 0; v < flow.height(); ++v)
      for (int u = 0; u < flow.width(); ++u) {
        flow.du(u, v) = random_bits();
        flow.dv(u, v) = random_bits();
      }
    write_flo(flow, dir / "f.flo");
    const FlowField fb = read_flo(dir / "f.flo");
    for (int v = 0; v < flow.height(); ++v)
      for (int u = 0; u < flow.width(); ++u)
        flo_bad += bits(fb.du(u, v)) != bits(flow.du(u, v)) || bits(fb.dv(u, v)) != bits(flow.dv(u, v));

    DepthMap d(dim(rng), dim(rng));
    for (auto& z : d.data()) z = random_bits();
    write_pfm(d, dir / "d.pfm");
    const DepthMap db = read_pfm(dir / "d.pfm");
    for (std::size_t i = 0; i < d.size(); ++i) pfm_bad += bits(db.data()[i]) != bits(d.data()[i]);

    std::uniform_real_distribution<float> coord(-1e3f, 1e3f);
    std::vector<ColoredPoint> pts(dim(rng));
    for (auto& p : pts) {
      p.xyz = Eigen::Vector3f(coord(rng), coord(rng), coord(rng));
      p.rgb = {std::uint8_t(rng()), std::uint8_t(rng()), std::uint8_t(rng())};
    }
    write_ply(pts, dir / "p.ply");
    const auto pb = read_ply(dir / "p.ply");
    ply_bad += pb.size() != pts.size();
    for (std::size_t i = 0; i < std::min(pb.size(), pts.size()); ++i)
      ply_bad += pb[i].xyz != pts[i].xyz || pb[i].rgb != pts[i].rgb;
  }
  std::filesystem::remove_all(dir);
  return {flo_bad == 0 && pfm_bad == 0 && ply_bad == 0,
          fmt("20 random payloads each: mismatches flo %ld, pfm %ld, ply %ld", flo_bad, pfm_bad, ply_bad)};
}

Outcome failure_mode() {
  const SceneSpec spec = load_scene("large_translation.json");
  const GroundTruth gt = render(spec);
  PipelineConfig cfg = oracle_config();
  cfg.knn_K = 15;
  cfg.particles = 20;
  const auto rec = reconstruct({gt.frame1, gt.flow, spec.intrinsics, {}}, cfg);
  const auto rep = evaluate_depth(rec.depth(), evaluation_depth(gt), &rec.labels);
  const int n = rec.ctx.size();
  std::vector<double> sp_mre(n, -1);
  for (const auto& s : rep.per_sp) sp_mre[s.id] = s.mre;
  // Region: superpixels containing any pixel of the fast-moving plane.
  int unreliable_in = 0, unreliable_out = 0, n_in = 0, n_out = 0;
  double sum_in = 0, sum_out = 0;
  for (int i = 0; i < n; ++i) {
    bool touches = false;
    for (const auto& px : rec.ctx.superpixels[i].pixels) touches |= spec.planes[gt.labels(px)].motion != 0;
    const bool unreliable = rec.patches[i].status == PatchStatus::Unreliable;
    (touches ? unreliable_in : unreliable_out) += unreliable;
    if (sp_mre[i] < 0) continue;
    if (touches) {
      sum_in += sp_mre[i];
      ++n_in;
    } else {
      sum_out += sp_mre[i];
      ++n_out;
    }
  }
  const double in = n_in ? sum_in / n_in : 0, out = n_out ? sum_out / n_out : 0;
  return {unreliable_in > 0 && unreliable_out == 0 && in > 0.05 && in > 10 * out,
          fmt("unreliable patches: %d in the moving region, %d elsewhere; mean superpixel MRE %.4f in region vs "
              "%.4f elsewhere",
              unreliable_in, unreliable_out, in, out)};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"oracle reconstruction", oracle_reconstruction},
      {"relative-scale recovery", scale_recovery},
      {"homography round trip", homography_round_trip},
      {"energy oracle equivalence", energy_oracle},
      {"E_proj scale invariance", projection_scale_invariance},
      {"TRW-S correctness", trws_correctness},
      {"refinement monotonicity and recovery", refinement},
      {"K-sensitivity", k_sensitivity},
      {"noise robustness", noise_robustness},
      {"format round trips", format_round_trips},
      {"failure-mode characterization", failure_mode},
  };
  int failed = 0, index = 0;
  for (const auto& [name, check] : criteria) {
    ++index;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s [%2d] %s: %s\n", o.pass ? "PASS" : "FAIL", index, name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", index - failed, index);
  return failed == 0 ? 0 : 1;
}
