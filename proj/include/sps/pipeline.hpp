#pragma once

// End-to-end reconstruction: superpixels -> per-patch local SfM ->
// shared-motion selection and proxies -> K-NN graph -> scale solve -> refinement ->
// depth, exports and metrics.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sps/energy.hpp"
#include "sps/errors.hpp"
#include "sps/evaluate.hpp"
#include "sps/io.hpp"
#include "sps/local_sfm.hpp"
#include "sps/refine.hpp"
#include "sps/scale_solver.hpp"
#include "sps/scene_graph.hpp"
#include "sps/slic.hpp"

namespace sps {

namespace fs = std::filesystem;

struct PipelineConfig {
  int n_superpixels = 1200;
  int knn_K = 15;
  double beta = 3.0;
  double sigma = 15.0;
  double alpha1 = 1.0;
  double alpha2 = 0.1;
  int refine_iters = 8;
  int particles = 50;
  std::uint64_t seed = 0;
  double slic_compactness = 10.0;
  double min_inlier_fraction = 0.6;  // below this a patch is flagged unreliable
  std::string align = "median";      // or "least_squares"

  // Paths; relative ones resolve against the config file's directory.
  std::string frame1;
  std::string frame2;  // optional, recorded only
  std::string flow;
  std::string labels;  // optional: precomputed superpixels
  std::string intrinsics;
  std::string gt_depth;  // optional: enables metrics
  std::string output = "out";

  void validate() const {
    auto require = [](bool ok, const std::string& msg) {
      if (!ok) throw InputError("config: " + msg);
    };
    require(n_superpixels >= 1, "n_superpixels must be >= 1");
    require(knn_K >= 1, "knn_K must be >= 1");
    require(beta > 0, "beta must be > 0");
    require(sigma > 0, "sigma must be > 0");
    require(alpha1 >= 0 && alpha2 >= 0, "alpha1 and alpha2 must be >= 0");
    require(refine_iters >= 0 && refine_iters <= 100, "refine_iters must be in [0, 100]");
    require(particles >= 1 && particles <= 500, "particles must be in [1, 500]");
    require(slic_compactness > 0, "slic_compactness must be > 0");
    require(min_inlier_fraction >= 0 && min_inlier_fraction <= 1, "min_inlier_fraction must be in [0, 1]");
    require(align == "median" || align == "least_squares", "align must be median or least_squares");
  }

  EnergyParams energy_params() const {
    EnergyParams p;
    p.beta = beta;
    p.sigma = sigma;
    p.alpha1 = alpha1;
    p.alpha2 = alpha2;
    p.knn_k = knn_K;
    return p;
  }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"n_superpixels", c.n_superpixels},
          {"knn_K", c.knn_K},
          {"beta", c.beta},
          {"sigma", c.sigma},
          {"alpha1", c.alpha1},
          {"alpha2", c.alpha2},
          {"refine_iters", c.refine_iters},
          {"particles", c.particles},
          {"seed", c.seed},
          {"slic_compactness", c.slic_compactness},
          {"min_inlier_fraction", c.min_inlier_fraction},
          {"align", c.align},
          {"frame1", c.frame1},
          {"frame2", c.frame2},
          {"flow", c.flow},
          {"labels", c.labels},
          {"intrinsics", c.intrinsics},
          {"gt_depth", c.gt_depth},
          {"output", c.output}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("config: expected a JSON object");
  PipelineConfig c;
  const nlohmann::json known = to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw InputError("config: unknown key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw InputError(std::string("config: '") + key + "' has the wrong type");
    }
  };
  get("n_superpixels", c.n_superpixels);
  get("knn_K", c.knn_K);
  get("beta", c.beta);
  get("sigma", c.sigma);
  get("alpha1", c.alpha1);
  get("alpha2", c.alpha2);
  get("refine_iters", c.refine_iters);
  get("particles", c.particles);
  get("seed", c.seed);
  get("slic_compactness", c.slic_compactness);
  get("min_inlier_fraction", c.min_inlier_fraction);
  get("align", c.align);
  get("frame1", c.frame1);
  get("frame2", c.frame2);
  get("flow", c.flow);
  get("labels", c.labels);
  get("intrinsics", c.intrinsics);
  get("gt_depth", c.gt_depth);
  get("output", c.output);
  c.validate();
  return c;
}

/// Reads a config file and resolves relative paths against its directory.
inline PipelineConfig read_config(const fs::path& path) {
  PipelineConfig c = config_from_json(read_json(path));
  const fs::path base = path.parent_path();
  for (std::string* p : {&c.frame1, &c.frame2, &c.flow, &c.labels, &c.intrinsics, &c.gt_depth, &c.output})
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

/// FNV-1a of the canonical config dump, as 16 hex digits.
inline std::string config_hash(const PipelineConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

struct PipelineInputs {
  ColorImage frame1;
  FlowField flow;
  Intrinsics k;
  std::optional<LabelMap> labels;
};

struct ReliabilityCounts {
  int reliable = 0;
  int static_ = 0;
  int unreliable = 0;
};

struct RunReport {
  std::vector<std::pair<std::string, double>> timings;  // seconds per stage
  double energy_initial = 0.0;  // e_total at lambda = 1/N
  double energy_after_scales = 0.0;
  std::vector<double> energy_refine;  // e_total across refine iterations
  double scale_kkt = 0.0;
  bool scale_converged = true;
  ReliabilityCounts counts;
  int n_superpixels = 0;
  int knn_edges = 0;
  std::vector<std::string> warnings;
  std::optional<MreReport> metrics;
};

/// Machine-readable summary. Timings are left out so identical runs produce
/// identical bytes.
inline nlohmann::json metrics_json(const RunReport& r) {
  nlohmann::json j = {
      {"n_superpixels", r.n_superpixels},
      {"knn_edges", r.knn_edges},
      {"patches",
       {{"reliable", r.counts.reliable}, {"static", r.counts.static_}, {"unreliable", r.counts.unreliable}}},
      {"energy",
       {{"initial", r.energy_initial},
        {"after_scales", r.energy_after_scales},
        {"refine", r.energy_refine}}},
      {"scale_solver", {{"kkt_residual", r.scale_kkt}, {"converged", r.scale_converged}}},
      {"warnings", r.warnings}};
  if (r.metrics) j["evaluation"] = to_json(*r.metrics);
  return j;
}

struct Reconstruction {
  LabelMap labels;
  std::vector<PlanarPatch> patches;
  SceneContext ctx;
  SceneState state;
  ScaleSolution scales;
  RefineResult refinement;
  RunReport report;

  DepthMap depth() const { return depth_from_state(ctx, state); }
};

using LogFn = std::function<void(const std::string&)>;

namespace detail {

// Re-raises the in-flight library error with the stage name prepended,
// keeping its exit-code class.
[[noreturn]] inline void rethrow_staged(const std::string& stage) {
  try {
    throw;
  } catch (const InputError& e) {
    throw InputError(stage + ": " + e.what());
  } catch (const Error& e) {
    throw NumericalError(stage + ": " + e.what());
  }
}

class StageTimer {
 public:
  StageTimer(RunReport& r, const LogFn& log) : report_(r), log_(log) {}
  template <class F>
  auto run(const std::string& name, F&& f) {
    if (log_) log_("stage " + name);
    const auto t0 = std::chrono::steady_clock::now();
    struct Record {
      RunReport& r;
      std::string name;
      std::chrono::steady_clock::time_point t0;
      ~Record() {
        r.timings.emplace_back(
            name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
    } rec{report_, name, t0};
    try {
      return f();
    } catch (const Error&) {
      rethrow_staged(name);
    }
  }

 private:
  RunReport& report_;
  const LogFn& log_;
};

}  // namespace detail

/// Runs the reconstruction on in-memory inputs.
inline Reconstruction reconstruct(const PipelineInputs& in, const PipelineConfig& cfg,
                                  const LogFn& log = {}) {
  cfg.validate();
  const EnergyParams prm = cfg.energy_params();
  if (in.flow.width() != in.frame1.width() || in.flow.height() != in.frame1.height())
    throw InputError("ingest: flow and frame sizes differ");

  Reconstruction rec;
  RunReport& report = rec.report;
  detail::StageTimer timer(report, log);
  auto warn = [&](const std::string& msg) {
    report.warnings.push_back(msg);
    if (log) log("warning: " + msg);
  };

  std::vector<Superpixel> sps;
  std::vector<BoundaryPair> boundary;
  timer.run("superpixels", [&] {
    if (in.labels) {
      if (in.labels->width() != in.frame1.width() || in.labels->height() != in.frame1.height())
        throw InputError("label map and frame sizes differ");
      rec.labels = *in.labels;
    } else {
      const int target = std::min<long>(cfg.n_superpixels, long(in.frame1.width()) * in.frame1.height());
      rec.labels = slic_segment(in.frame1, target, cfg.slic_compactness);
    }
    sps = build_superpixels(rec.labels, in.frame1);
    boundary = boundary_adjacency(sps);
  });
  const int n = static_cast<int>(sps.size());
  report.n_superpixels = n;

  std::vector<std::vector<Correspondence>> corr(n);
  timer.run("local_sfm", [&] {
    HomographyFitOptions hopt;
    hopt.seed = cfg.seed;
    rec.patches.resize(n);
    for (int i = 0; i < n; ++i) {
      auto& patch = rec.patches[i];
      try {
        corr[i] = flow_correspondences(in.flow, sps[i]);
        patch = reconstruct_patch(sps[i], corr[i], in.k, hopt);
        // A patch whose flow is mostly unexplained by one plane is not trusted.
        if (patch.status == PatchStatus::Reliable && patch.inlier_fraction < cfg.min_inlier_fraction)
          patch.status = PatchStatus::Unreliable;
      } catch (const Error&) {
        patch = PlanarPatch{};
        patch.status = PatchStatus::Unreliable;
      }
      patch.sp_id = i;
    }
    select_motions(rec.patches, sps, boundary, corr, in.k, region_motions(rec.patches, sps, boundary, corr, in.k));
    assign_proxies(rec.patches, sps, boundary, in.k);
    for (const auto& p : rec.patches) {
      if (p.status == PatchStatus::Reliable) ++report.counts.reliable;
      else if (p.status == PatchStatus::Static) ++report.counts.static_;
      else ++report.counts.unreliable;
    }
    if (report.counts.reliable == 0 && report.counts.static_ == 0)
      throw DegenerateGeometryError("no superpixel could be reconstructed");
    if (report.counts.unreliable > 0)
      warn(std::to_string(report.counts.unreliable) + " of " + std::to_string(n) +
           " patches flagged unreliable");
  });

  KnnGraph knn;
  timer.run("scene_graph", [&] {
    if (n >= 2) {
      knn = build_knn_graph(unit_scale_anchors(rec.patches), cfg.knn_K);
    } else {
      knn = KnnGraph(1);
      warn("single superpixel: no ARAP edges, lambda = 1");
    }
    for (const auto& adj : knn) report.knn_edges += static_cast<int>(adj.size());
    rec.ctx = build_scene_context(in.k, in.frame1, sps, knn, boundary, corr, prm.beta);
    for (int i = 0; i < n; ++i) rec.ctx.is_static[i] = rec.patches[i].status == PatchStatus::Static;
    rec.state = initial_state(rec.patches);
    report.energy_initial = e_total(rec.ctx, rec.state, prm).total;
  });

  timer.run("solve_scales", [&] {
    rec.scales = solve_scales(rec.ctx, rec.state, prm, scale_ties(rec.patches));
    if (!rec.scales.observable) warn("no translating patch: relative scales unobservable, uniform lambda used");
    if (!rec.scales.converged)
      warn("scale solver stopped with KKT residual " + std::to_string(rec.scales.kkt_residual));
    for (int i = 0; i < n; ++i) rec.state.patches[i].lambda = rec.scales.lambda[i];
    report.scale_kkt = rec.scales.kkt_residual;
    report.scale_converged = rec.scales.converged;
    report.energy_after_scales = e_total(rec.ctx, rec.state, prm).total;
  });

  timer.run("refine", [&] {
    RefineOptions ropt;
    ropt.iterations = cfg.refine_iters;
    ropt.particles = cfg.particles;
    ropt.seed = cfg.seed;
    rec.refinement = refine(rec.ctx, rec.state, prm, ropt);
    report.energy_refine = rec.refinement.energy_history;
  });
  return rec;
}

inline PipelineInputs load_inputs(const PipelineConfig& cfg) {
  PipelineInputs in;
  auto need = [](const std::string& p, const char* what) {
    if (p.empty()) throw InputError(std::string("config: missing path '") + what + "'");
  };
  try {
    need(cfg.frame1, "frame1");
    need(cfg.flow, "flow");
    need(cfg.intrinsics, "intrinsics");
    in.frame1 = read_png_rgb(cfg.frame1);
    in.flow = read_flo(cfg.flow);
    in.k = intrinsics_from_json(read_json(cfg.intrinsics));
    if (!cfg.labels.empty()) in.labels = read_labels(cfg.labels);
  } catch (const Error&) {
    detail::rethrow_staged("ingest");
  }
  return in;
}

struct RunOutput {
  Reconstruction rec;
  fs::path directory;
};

/// Full run from a config: loads inputs, reconstructs, evaluates against
/// ground truth when given, and writes depth.pfm, points.ply, labels.png,
/// metrics.json, report.json and config.json into <output>/<config hash>.
inline RunOutput run(const PipelineConfig& cfg, const LogFn& log = {}) {
  cfg.validate();
  const PipelineInputs in = load_inputs(cfg);
  RunOutput out{reconstruct(in, cfg, log), fs::path(cfg.output) / config_hash(cfg)};
  auto& rec = out.rec;
  const DepthMap depth = rec.depth();
  if (!cfg.gt_depth.empty()) {
    try {
      const DepthMap gt = read_pfm(cfg.gt_depth);
      const AlignMode mode = cfg.align == "median" ? AlignMode::Median : AlignMode::LeastSquares;
      rec.report.metrics = evaluate_depth(depth, gt, &rec.labels, mode);
      if (log) log("MRE " + std::to_string(rec.report.metrics->mre));
    } catch (const Error&) {
      detail::rethrow_staged("evaluate");
    }
  }

  const fs::path tmp = out.directory.string() + ".partial";
  try {
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    write_pfm(depth, tmp / "depth.pfm");
    export_pointcloud(rec.ctx, rec.state, in.frame1, tmp / "points.ply");
    write_png_labels(rec.labels, tmp / "labels.png");
    write_json(metrics_json(rec.report), tmp / "metrics.json");
    nlohmann::json full = metrics_json(rec.report);
    nlohmann::json timings = nlohmann::json::object();
    for (const auto& [name, sec] : rec.report.timings) timings[name] = sec;
    full["timings_s"] = timings;
    write_json(full, tmp / "report.json");
    write_json(to_json(cfg), tmp / "config.json");
    fs::remove_all(out.directory);
    fs::rename(tmp, out.directory);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp);
    throw InputError(std::string("output: ") + e.what());
  } catch (const Error&) {
    fs::remove_all(tmp);
    detail::rethrow_staged("output");
  }
  if (log) log("wrote " + out.directory.string());
  return out;
}

}  // namespace sps
