#include "sdi/pipeline.hpp"

#include <CLI11.hpp>
#include <tbb/global_control.h>

#include <iostream>
#include <memory>
#include <optional>

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  bool overwrite = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  if (config_required)
    opt->required();
  cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_option("--seed", c.seed, "override the configuration seed");
  cmd->add_option("--threads", c.threads, "cap on worker threads (0 = all)")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--overwrite", c.overwrite, "replace an existing non-empty output directory");
}

sdi::PipelineConfig make_config(const Common& c) {
  sdi::PipelineConfig cfg = c.config.empty() ? sdi::default_config() : sdi::load_config(c.config);
  if (c.seed)
    cfg.set_seed(*c.seed);
  return cfg;
}

void print(const sdi::RunReport& r) {
  std::cout << r.stage << ": " << r.metrics.dump() << " (" << r.wall_seconds << " s)\n";
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scan-position recovery and reconstruction for modulator-based diffraction imaging"};
  app.require_subcommand(1);
  Common common;

  auto* simulate = app.add_subcommand("simulate", "synthesize a dataset from a configuration");
  add_common(simulate, common, true);
  bool calibration = false;
  simulate->add_flag("--calibration", calibration, "write the diffuser-translation calibration dataset instead");

  auto* reconstruct = app.add_subcommand("reconstruct", "run the reconstruction engine on a dataset");
  add_common(reconstruct, common, false);
  std::string dataset, recon, positions, probe, modulator, mode, edges;
  std::optional<int> iterations;
  reconstruct->add_option("--dataset", dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  reconstruct->add_option("--mode", mode, "separated, exitwave or calibrate");
  reconstruct->add_option("--iterations", iterations, "number of sweeps")->check(CLI::PositiveNumber);
  reconstruct->add_option("--probe", probe, "initial probe (.cfield)")->check(CLI::ExistingFile);
  reconstruct->add_option("--modulator", modulator, "calibrated modulator (.cfield)")->check(CLI::ExistingFile);

  auto* pos = app.add_subcommand("positions", "recover scan positions from a reconstruction");
  add_common(pos, common, false);
  pos->add_option("--recon", recon, "reconstruction directory")->required()->check(CLI::ExistingDirectory);
  pos->add_option("--dataset", dataset, "dataset directory, for scoring against truth")->check(CLI::ExistingDirectory);
  pos->add_option("--edges", edges, "auto, temporal:K, grid, grid:RxC or all_pairs");

  auto* assemble = app.add_subcommand("assemble", "stitch and refine the full object");
  add_common(assemble, common, false);
  assemble->add_option("--dataset", dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  assemble->add_option("--recon", recon, "reconstruction directory")->required()->check(CLI::ExistingDirectory);
  assemble->add_option("--positions", positions, "positions directory")->required()->check(CLI::ExistingDirectory);

  auto* calibrate = app.add_subcommand("calibrate", "recover the modulator from a diffuser-translation dataset");
  add_common(calibrate, common, false);
  calibrate->add_option("--dataset", dataset, "calibration dataset directory")->required()->check(CLI::ExistingDirectory);
  calibrate->add_option("--probe", probe, "probe prior (.cfield); default: ideal probe from the manifest")
      ->check(CLI::ExistingFile);
  calibrate->add_option("--iterations", iterations, "number of sweeps")->check(CLI::PositiveNumber);

  auto* evaluate = app.add_subcommand("evaluate", "score recovered positions against simulation truth");
  add_common(evaluate, common, false);
  std::vector<std::string> runs;
  evaluate->add_option("--run", runs, "pipeline output directory (repeatable)")->check(CLI::ExistingDirectory);
  evaluate->add_option("--dataset", dataset, "dataset directory")->check(CLI::ExistingDirectory);
  evaluate->add_option("--positions", positions, "positions directory")->check(CLI::ExistingDirectory);
  evaluate->add_option("--recon", recon, "reconstruction directory")->check(CLI::ExistingDirectory);

  auto* pipeline = app.add_subcommand("pipeline", "simulate, reconstruct, register, assemble and evaluate");
  add_common(pipeline, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::unique_ptr<tbb::global_control> limit;
  if (common.threads > 0)
    limit = std::make_unique<tbb::global_control>(tbb::global_control::max_allowed_parallelism,
                                                  static_cast<std::size_t>(common.threads));

  try {
    sdi::PipelineConfig cfg = make_config(common);
    const fs::path out = common.out;
    const bool ow = common.overwrite;
    if (*simulate) {
      print(calibration ? sdi::run_simulate_calibration(cfg, out, ow) : sdi::run_simulate(cfg, out, ow));
    } else if (*reconstruct) {
      if (!mode.empty())
        cfg.reconstruct.recon.mode = sdi::parse_mode(mode);
      if (iterations)
        cfg.reconstruct.recon.iterations = *iterations;
      if (!probe.empty())
        cfg.reconstruct.probe_path = probe;
      if (!modulator.empty())
        cfg.reconstruct.modulator_path = modulator;
      if (cfg.reconstruct.recon.mode == sdi::ReconMode::Calibrate)
        cfg.reconstruct.recon.update_probe = false;
      cfg.reconstruct.recon.validate();
      print(sdi::run_reconstruct(cfg, dataset, out, ow));
    } else if (*pos) {
      if (!edges.empty())
        cfg.positions.edges = edges;
      print(sdi::run_positions(cfg, recon, dataset, out, ow));
    } else if (*assemble) {
      print(sdi::run_assemble(cfg, dataset, recon, positions, out, ow));
    } else if (*calibrate) {
      if (iterations)
        cfg.calibration.recon.iterations = *iterations;
      print(sdi::run_calibrate(cfg, dataset, probe, out, ow));
    } else if (*evaluate) {
      std::vector<sdi::EvaluationInput> inputs;
      for (const auto& r : runs)
        inputs.push_back({fs::path(r) / "dataset", fs::path(r) / "positions", fs::path(r) / "recon"});
      if (!dataset.empty() || !positions.empty()) {
        if (dataset.empty() || positions.empty())
          throw sdi::ConfigError("evaluate needs both --dataset and --positions");
        inputs.push_back({dataset, positions, recon});
      }
      print(sdi::run_evaluate(cfg, inputs, out, ow));
    } else if (*pipeline) {
      for (const auto& r : sdi::run_pipeline(cfg, out, ow))
        print(r);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sdi::exit_code(e);
  }
  return 0;
}
