// recon: command-line front end.
//   recon run   --config cfg.json
//   recon synth --spec spec.json --out dir
//   recon eval  --est d.pfm --gt d.pfm [--labels l.png] [--align median|least_squares] [--out m.json]
// Exit codes: 0 ok, 1 input error, 2 numerical failure. Logs go to stderr.

#include <iostream>

#include <CLI11.hpp>

#include "sps/sps.hpp"

namespace {

void log_line(const std::string& msg) { std::cerr << "[recon] " << msg << '\n'; }

int run_command(const std::string& config_path) {
  const sps::PipelineConfig cfg = sps::read_config(config_path);
  log_line("config " + config_path + " (hash " + sps::config_hash(cfg) + ")");
  const auto out = sps::run(cfg, log_line);
  for (const auto& w : out.rec.report.warnings) log_line("warning: " + w);
  for (const auto& [stage, sec] : out.rec.report.timings)
    log_line("timing " + stage + " " + std::to_string(sec) + " s");
  return 0;
}

int synth_command(const std::string& spec_path, const std::string& out_dir) {
  const sps::SceneSpec spec = sps::read_scene_spec(spec_path);
  const sps::GroundTruth gt = sps::render(spec);
  sps::write_ground_truth(gt, spec.intrinsics, out_dir);
  log_line("wrote " + out_dir);
  return 0;
}

int eval_command(const std::string& est_path, const std::string& gt_path, const std::string& labels_path,
                 const std::string& align, const std::string& out_path) {
  const sps::DepthMap est = sps::read_pfm(est_path);
  const sps::DepthMap gt = sps::read_pfm(gt_path);
  std::optional<sps::LabelMap> labels;
  if (!labels_path.empty()) labels = sps::read_labels(labels_path);
  const auto mode = align == "least_squares" ? sps::AlignMode::LeastSquares : sps::AlignMode::Median;
  const auto rep = sps::evaluate_depth(est, gt, labels ? &*labels : nullptr, mode);
  log_line("MRE " + std::to_string(rep.mre) + " over " + std::to_string(rep.pixels) + " px (scale " +
           std::to_string(rep.global_scale) + ", excluded " + std::to_string(rep.excluded) + ")");
  if (!out_path.empty()) sps::write_json(sps::to_json(rep), out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense two-frame piecewise-planar reconstruction of dynamic scenes"};
  app.require_subcommand(1);

  std::string config;
  auto* run = app.add_subcommand("run", "reconstruct from a config file");
  run->add_option("--config", config, "pipeline config JSON")->required();

  std::string spec, out_dir;
  auto* synth = app.add_subcommand("synth", "render a synthetic ground-truth scene");
  synth->add_option("--spec", spec, "scene spec JSON")->required();
  synth->add_option("--out", out_dir, "output directory")->required();

  std::string est, gt, labels, align = "median", out;
  auto* eval = app.add_subcommand("eval", "mean relative depth error after scale alignment");
  eval->add_option("--est", est, "estimated depth PFM")->required();
  eval->add_option("--gt", gt, "ground-truth depth PFM")->required();
  eval->add_option("--labels", labels, "superpixel labels for a per-superpixel breakdown");
  eval->add_option("--align", align, "median or least_squares")
      ->check(CLI::IsMember({"median", "least_squares"}));
  eval->add_option("--out", out, "write the metrics JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return run_command(config);
    if (*synth) return synth_command(spec, out_dir);
    if (*eval) return eval_command(est, gt, labels, align, out);
  } catch (const sps::Error& e) {
    log_line(std::string(e.kind() == sps::ErrorKind::Input ? "input error: " : "numerical failure: ") +
             e.what());
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    log_line(std::string("numerical failure: ") + e.what());
    return 2;
  }
  return 1;
}
