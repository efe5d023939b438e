#include "helpers.hpp"

#include "sdi/dataset.hpp"
#include "sdi/errors.hpp"
#include "sdi/pipeline.hpp"
#include "sdi/table_io.hpp"

#include <doctest.h>
#include <tbb/global_control.h>

#include <fstream>
#include <sstream>

using namespace sdi;
using namespace sdi::test;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json bundled(const char* name) {
  std::ifstream in(fs::path(SDI_CONFIG_DIR) / name);
  REQUIRE(in);
  return json::parse(in);
}

std::string error_of(const json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

int count_lines(const fs::path& path) {
  const std::string text = slurp(path);
  return static_cast<int>(std::count(text.begin(), text.end(), '\n'));
}

/// Every regular file under `a` except run reports, compared against `b`.
void check_same_files(const fs::path& a, const fs::path& b) {
  int compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file() || entry.path().filename() == "report.json")
      continue;
    const fs::path other = b / fs::relative(entry.path(), a);
    INFO(entry.path().string());
    REQUIRE(fs::exists(other));
    CHECK(slurp(entry.path()) == slurp(other));
    ++compared;
  }
  CHECK(compared > 0);
}

json six_by_six() {
  json doc = bundled("optical_a3.json");
  doc["scan"]["rows"] = 6;
  doc["scan"]["cols"] = 6;
  doc["reconstruct"]["iterations"] = 150;
  doc["assemble"]["iterations"] = 10;
  return doc;
}

} // namespace

TEST_CASE("config diagnostics name the offending key") {
  const json good = bundled("optical_a3.json");
  CHECK(error_of(good).empty());
  SUBCASE("missing required key") {
    json doc = good;
    doc["geometry"].erase("wavelength_m");
    CHECK(error_of(doc).find("geometry.wavelength_m") != std::string::npos);
  }
  SUBCASE("unknown key") {
    json doc = good;
    doc["probe"]["diameter"] = 1e-3;
    CHECK(error_of(doc).find("probe.diameter") != std::string::npos);
  }
  SUBCASE("wrong type") {
    json doc = good;
    doc["scan"]["rows"] = "six";
    CHECK(error_of(doc).find("scan.rows") != std::string::npos);
  }
  SUBCASE("non-positive physical parameter") {
    json doc = good;
    doc["geometry"]["z_md_m"] = -1.0;
    CHECK(error_of(doc).find("geometry.z_md_m") != std::string::npos);
  }
  SUBCASE("unsupported version") {
    json doc = good;
    doc["version"] = 2;
    CHECK(error_of(doc).find("version") != std::string::npos);
  }
  SUBCASE("bad enum value") {
    json doc = good;
    doc["reconstruct"]["mode"] = "joint";
    CHECK(error_of(doc).find("reconstruct.mode") != std::string::npos);
  }
  SUBCASE("unreadable file") {
    CHECK_THROWS_AS(load_config(scratch_dir("cfg") / "absent.json"), ConfigError);
  }
}

TEST_CASE("bundled configs simulate and echo their geometry") {
  SUBCASE("optical") {
    const PipelineConfig cfg = parse_config(bundled("optical_a3.json"));
    const fs::path out = scratch_dir("sim_optical");
    const RunReport rep = run_simulate(cfg, out, true);
    CHECK(rep.metrics["n_frames"] == 144);
    CHECK(rep.metrics.contains("overlap_mean"));
    const ScanDataset ds = load_dataset(out);
    CHECK(ds.size() == 144);
    CHECK(ds.geometry.wavelength == doctest::Approx(632.8e-9));
    CHECK(ds.geometry.z_sample_to_modulator == doctest::Approx(11.5e-3));
    CHECK(ds.geometry.detector_pitch == doctest::Approx(6.5e-6));
    CHECK(ds.frame_shape() == Shape{128, 128});
    const json report = json::parse(slurp(out / "report.json"));
    CHECK(report["config"]["geometry"]["wavelength_m"] == doctest::Approx(632.8e-9));
  }
  SUBCASE("x-ray") {
    json doc = bundled("xray_a2.json");
    doc["scan"]["rows"] = 2;
    doc["scan"]["cols"] = 2;
    const PipelineConfig cfg = parse_config(doc);
    CHECK(cfg.simulate.probe.diameter == doctest::Approx(4.1e-6));
    const fs::path out = scratch_dir("sim_xray");
    run_simulate(cfg, out, true);
    const ScanDataset ds = load_dataset(out);
    CHECK(ds.geometry.wavelength == doctest::Approx(1.653e-10));
    CHECK(ds.geometry.z_sample_to_modulator == doctest::Approx(6.56e-3));
    CHECK(ds.geometry.z_modulator_to_detector == doctest::Approx(7.7));
    REQUIRE(ds.probe_spec);
    CHECK(ds.probe_spec->diameter == doctest::Approx(4.1e-6));
  }
}

TEST_CASE("output directories require an explicit overwrite") {
  const fs::path dir = scratch_dir("overwrite");
  CHECK_NOTHROW(prepare_output(dir, false));
  std::ofstream(dir / "stale.txt") << "x";
  CHECK_THROWS_AS(prepare_output(dir, false), ConfigError);
  CHECK(fs::exists(dir / "stale.txt"));
  CHECK_NOTHROW(prepare_output(dir, true));
  CHECK(fs::is_empty(dir));
  std::ofstream(dir.parent_path() / "sdi_test_overwrite_file") << "x";
  CHECK_THROWS_AS(prepare_output(dir.parent_path() / "sdi_test_overwrite_file", true), ConfigError);
}

TEST_CASE("exit codes") {
  CHECK(exit_code(ConfigError("x")) == 2);
  CHECK(exit_code(PhysicsError("x")) == 3);
  CHECK(exit_code(GraphError("x")) == 4);
  CHECK(exit_code(DivergenceError("x")) == 5);
  CHECK(exit_code(std::runtime_error("x")) == 1);
  try {
    const json broken = json::parse("{");
    CHECK(broken.is_null());
  } catch (const std::exception& e) {
    CHECK(exit_code(e) == 2);
  }
}

TEST_CASE("full pipeline on a 6x6 maze scan") {
  const PipelineConfig cfg = parse_config(six_by_six());
  const fs::path out = scratch_dir("pipeline6");
  const auto reports = run_pipeline(cfg, out, true);
  REQUIRE(reports.size() == 5);
  for (const char* stage : {"dataset", "recon", "positions", "assemble", "evaluate"})
    CHECK(fs::exists(out / stage / "report.json"));
  CHECK(count_lines(out / "positions" / "positions.csv") == 37);
  CHECK(reports.back().metrics["mean_position_error_px"].get<double>() < 0.5);
  CHECK(reports[1].metrics["residual"].get<double>() < 1e-3);

  // stages rerun with identical inputs are byte-identical
  const fs::path again = scratch_dir("pipeline6_again");
  run_simulate(cfg, again / "dataset", true);
  check_same_files(out / "dataset", again / "dataset");
  run_positions(cfg, out / "recon", out / "dataset", again / "positions", true);
  check_same_files(out / "positions", again / "positions");
  run_assemble(cfg, out / "dataset", out / "recon", out / "positions", again / "assemble", true);
  check_same_files(out / "assemble", again / "assemble");

  // and do not depend on the worker count
  {
    const fs::path one = scratch_dir("pipeline6_one_thread");
    tbb::global_control limit(tbb::global_control::max_allowed_parallelism, 1);
    run_simulate(cfg, one / "dataset", true);
    check_same_files(out / "dataset", one / "dataset");
    run_positions(cfg, out / "recon", out / "dataset", one / "positions", true);
    check_same_files(out / "positions", one / "positions");
  }

  // evaluating the truth gives zero error
  const ScanDataset ds = load_dataset(out / "dataset");
  const fs::path truth = scratch_dir("truth_positions");
  write_shift_csv(truth / "positions.csv", ds.truth->plan.positions);
  const fs::path eval_truth = scratch_dir("eval_truth");
  const RunReport rep = run_evaluate(cfg, {{out / "dataset", truth, {}}}, eval_truth, true);
  CHECK(rep.metrics["mean_position_error_px"].get<double>() < 1e-6);
  const std::string sweep = slurp(eval_truth / "sweep.csv");
  CHECK(sweep.rfind("overlap_ratio,mean_err_px,std_err_px,n_frames,converged\n", 0) == 0);
  CHECK(sweep.find(",0.000000,0.000000,36,1\n") != std::string::npos);
  CHECK(slurp(eval_truth / "errors.csv").rfind("frame,dy,dx,magnitude\n", 0) == 0);
  CHECK(count_lines(eval_truth / "errors.csv") == 37);

  // several runs share one sweep table
  const fs::path eval_two = scratch_dir("eval_two");
  run_evaluate(cfg, {{out / "dataset", out / "positions", out / "recon"}, {out / "dataset", truth, {}}}, eval_two,
               true);
  CHECK(count_lines(eval_two / "sweep.csv") == 3);
  CHECK(fs::exists(eval_two / "errors_00.csv"));
  CHECK(fs::exists(eval_two / "errors_01.csv"));
}

TEST_CASE("evaluation needs simulation truth") {
  const fs::path ds_dir = scratch_dir("no_truth");
  json doc = bundled("optical_a3.json");
  doc["scan"]["rows"] = 2;
  doc["scan"]["cols"] = 2;
  run_simulate(parse_config(doc), ds_dir / "with", true);
  ScanDataset ds = load_dataset(ds_dir / "with");
  ds.truth.reset();
  save_dataset(ds_dir / "without", ds);
  write_shift_csv(ds_dir / "positions.csv", std::vector<Shift>(4));
  CHECK_THROWS_AS(run_evaluate(default_config(), {{ds_dir / "without", ds_dir, {}}}, ds_dir / "eval", true),
                  ConfigError);
}

TEST_CASE("sparse sub-grid of a dense scan") {
  json doc = bundled("optical_a3.json");
  doc["scan"]["sparse_stride"] = 2;
  const fs::path out = scratch_dir("sparse");
  const RunReport rep = run_simulate(parse_config(doc), out, true);
  CHECK(rep.metrics["n_frames"] == 36);
  const ScanDataset ds = load_dataset(out);
  CHECK(ds.size() == 36);
  REQUIRE(ds.truth);
  CHECK(ds.truth->plan.size() == 36);
  const fs::path truth = scratch_dir("sparse_positions");
  write_shift_csv(truth / "positions.csv", ds.truth->plan.positions);
  const fs::path eval = scratch_dir("sparse_eval");
  run_evaluate(default_config(), {{out, truth, {}}}, eval, true);
  CHECK(slurp(eval / "sweep.csv").find(",36,1\n") != std::string::npos);
}

TEST_CASE("identical blank frames give no usable edges") {
  // a transparent sample makes every frame identical and the objects flat
  const Scenario sc = make_scenario(3, 3, 0.4);
  const ComplexField blank(sc.sample.shape(), sc.sample.pitch(), "", cplx(1.0));
  ScanDataset ds = synthesize_dataset(blank, sc.probe, sc.modulator, sc.plan, {}, sc.geometry, {});
  ds.probe_spec = sc.probe_spec;
  ds.grid_rows = 3;
  ds.grid_cols = 3;
  double spread = 0.0;
  for (std::size_t k = 1; k < ds.size(); ++k)
    for (std::size_t i = 0; i < ds.frames[0].size(); ++i)
      spread = std::max(spread, std::abs(ds.frames[k][i] - ds.frames[0][i]));
  CHECK(spread < 1e-12);
  const fs::path dir = scratch_dir("blank");
  save_dataset(dir / "dataset", ds);
  json doc = bundled("optical_a3.json");
  doc["reconstruct"]["iterations"] = 20;
  const PipelineConfig cfg = parse_config(doc);
  run_reconstruct(cfg, dir / "dataset", dir / "recon", true);
  std::string message;
  try {
    run_positions(cfg, dir / "recon", {}, dir / "positions", true);
  } catch (const GraphError& e) {
    message = e.what();
  }
  CHECK(message.find("disconnected into 9 components") != std::string::npos);
  CHECK(message.find("12 featureless field") != std::string::npos);
  std::istringstream edges(slurp(dir / "positions" / "edges.csv"));
  std::string line;
  std::getline(edges, line);
  int rows = 0;
  while (std::getline(edges, line)) {
    ++rows;
    CHECK(line.back() == '0');
  }
  CHECK(rows == 12);
}
