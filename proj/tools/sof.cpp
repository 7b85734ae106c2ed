// Command-line driver: refine a manifest, evaluate flow directories,
// generate synthetic datasets, render flow visualizations.

#include <iostream>

#include <CLI11.hpp>

#include "sof/pipeline.hpp"

namespace {

void add_weight_option(CLI::App* cmd,
                       std::vector<std::string>& weight_args) {
  cmd->add_option("-w,--weight", weight_args,
                  "energy weight override, name=value (repeatable); names: "
                  "lambda_d, lambda_motion, lambda_time, lambda_layer, "
                  "lambda_space, lambda_aff, lambda_aff.<class>, "
                  "count_shared_once");
}

std::unordered_map<std::string, double> parse_weight_args(
    const std::vector<std::string>& args) {
  std::unordered_map<std::string, double> out;
  for (const auto& a : args) {
    const auto eq = a.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--weight expects name=value, got " + a);
    out[a.substr(0, eq)] = std::stod(a.substr(eq + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semantic flow refinement pipeline"};
  app.require_subcommand(1);

  // refine
  auto* refine = app.add_subcommand(
      "refine", "refine the flow of a sequence described by a manifest");
  std::string manifest_path;
  sof::PipelineOptions opts;
  std::vector<std::string> weight_args;
  std::string out_dir_override;
  refine->add_option("manifest", manifest_path, "sequence manifest file")
      ->required()
      ->check(CLI::ExistingFile);
  refine->add_option("-T,--window", opts.window_override,
                     "frames per window (overrides the manifest)");
  refine->add_option("-s,--seed", opts.seed, "RANSAC seed");
  refine->add_option("-j,--jobs", opts.jobs, "worker cap (0 = all cores)");
  refine->add_flag("--kitti-out", opts.kitti_output,
                   "write KITTI 16-bit PNG flow instead of .flo");
  refine->add_flag("--viz", opts.write_visualization,
                   "also write color-coded flow images");
  refine->add_option("-o,--output", out_dir_override,
                     "output directory (overrides the manifest)");
  add_weight_option(refine, weight_args);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate flow files against ground truth");
  std::string est_dir, gt_dir, report_path;
  sof::EvalOptions eopts;
  eval->add_option("estimated", est_dir, "directory of estimated flow files")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("truth", gt_dir, "directory of ground-truth flow files")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--fg-masks", eopts.fg_mask_dir,
                   "directory of foreground masks (fg_###.png)");
  eval->add_option("--nocc-masks", eopts.nocc_mask_dir,
                   "directory of non-occlusion masks (nocc_###.png)");
  eval->add_option("-o,--report", report_path, "also write the report here");

  // synth
  auto* synth = app.add_subcommand("synth", "render a synthetic dataset");
  std::string scene_path, synth_out;
  synth->add_option("scene", scene_path, "scene description file")
      ->required()
      ->check(CLI::ExistingFile);
  synth->add_option("out", synth_out, "output dataset directory")->required();

  // viz
  auto* viz = app.add_subcommand("viz", "render a flow file as a color image");
  std::string viz_in, viz_out;
  double viz_max = 0.0;
  viz->add_option("flow", viz_in, "flow file (.flo or KITTI .png)")
      ->required()
      ->check(CLI::ExistingFile);
  viz->add_option("image", viz_out, "output PNG")->required();
  viz->add_option("--max", viz_max, "magnitude mapped to full saturation");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*refine) {
      opts.weight_overrides = parse_weight_args(weight_args);
      sof::SequenceManifest manifest = sof::load_manifest(manifest_path);
      if (!out_dir_override.empty()) manifest.output_dir = out_dir_override;
      const sof::RunReport report = sof::run_refine(manifest, opts);
      size_t refined = 0;
      for (const auto& t : report.tracks) refined += t.refined;
      std::cout << "tracks " << report.tracks.size() << " refined " << refined
                << "\n";
      for (const auto& [k, v] : report.stage_ms)
        std::cout << "time_ms." << k << " " << v << "\n";
    } else if (*eval) {
      const auto results = sof::run_eval(est_dir, gt_dir, eopts);
      sof::write_eval_report(results, std::cout);
      if (!report_path.empty()) {
        std::ofstream f(report_path);
        sof::write_eval_report(results, f);
      }
    } else if (*synth) {
      const auto [scene, T] = sof::parse_scene_spec(scene_path);
      sof::write_synth_dataset(scene, T, synth_out);
      std::cout << "wrote " << synth_out << " (" << T << " frames)\n";
    } else if (*viz) {
      const sof::FlowField f = viz_in.ends_with(".png")
                                   ? sof::read_kitti_flow(viz_in)
                                   : sof::read_flo(viz_in);
      sof::write_flow_visualization(f, viz_out, viz_max);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
