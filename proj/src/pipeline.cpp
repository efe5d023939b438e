#include "sdi/pipeline.hpp"

#include "sdi/calibrate.hpp"
#include "sdi/dataset.hpp"
#include "sdi/errors.hpp"
#include "sdi/field_io.hpp"
#include "sdi/image_io.hpp"
#include "sdi/table_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace sdi {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config reader

namespace {

/// One JSON object of the config; remembers which keys were read so that
/// leftovers can be reported as unknown.
class Section {
public:
  Section(json doc, std::string path) : doc_(std::move(doc)), path_(std::move(path)) {
    if (doc_.is_null())
      doc_ = json::object();
    if (!doc_.is_object())
      throw ConfigError("config: '" + display() + "' must be an object");
  }

  bool has(const std::string& key) const { return doc_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!doc_.contains(key))
      return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    used_.insert(key);
    if (!doc_.contains(key))
      throw ConfigError("config: missing required key '" + qualified(key) + "'");
    return convert<T>(key);
  }

  Section child(const std::string& key) {
    used_.insert(key);
    return Section(doc_.contains(key) ? doc_[key] : json::object(), qualified(key));
  }

  double positive(const std::string& key, double fallback) {
    const double v = get<double>(key, fallback);
    check_positive(key, v);
    return v;
  }

  double require_positive(const std::string& key) {
    const double v = require<double>(key);
    check_positive(key, v);
    return v;
  }

  Range range(const std::string& key, Range fallback) {
    const auto v = get<std::vector<double>>(key, {fallback.lo, fallback.hi});
    if (v.size() != 2)
      throw ConfigError("config: '" + qualified(key) + "' must be a [low, high] pair");
    return {v[0], v[1]};
  }

  /// Throws on keys that were never read.
  void finish() const {
    for (const auto& item : doc_.items())
      if (!used_.count(item.key()))
        throw ConfigError("config: unknown key '" + qualified(item.key()) + "'");
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  void check_positive(const std::string& key, double v) const {
    if (!(v > 0.0) || !std::isfinite(v))
      throw ConfigError("config: '" + qualified(key) + "' must be positive");
  }

  template <typename T>
  T convert(const std::string& key) const {
    try {
      return doc_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + qualified(key) + "' has the wrong type");
    }
  }

  json doc_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename E>
E parse_enum(const std::string& text, const std::vector<std::pair<std::string, E>>& names, const std::string& key) {
  for (const auto& [name, value] : names)
    if (name == text)
      return value;
  std::string options;
  for (const auto& [name, value] : names)
    options += (options.empty() ? "" : ", ") + name;
  throw ConfigError("config: '" + key + "' must be one of " + options + " (got '" + text + "')");
}

ProbeSpec parse_probe(Section s, ProbeSpec p) {
  p.kind = parse_enum<ProbeKind>(s.get<std::string>("kind", p.kind == ProbeKind::Aperture ? "aperture" : "divergent"),
                                 {{"aperture", ProbeKind::Aperture}, {"divergent", ProbeKind::Divergent}},
                                 s.qualified("kind"));
  p.diameter = s.positive("diameter_m", p.diameter);
  p.defocus = s.get<double>("defocus_m", p.defocus);
  p.focal = s.get<double>("focal_m", p.focal);
  s.finish();
  return p;
}

ModulatorSpec parse_modulator(Section s, ModulatorSpec m) {
  m.kind = parse_enum<ModulatorSpec::Kind>(
      s.get<std::string>("kind", m.kind == ModulatorSpec::Kind::Random ? "random" : "grating"),
      {{"random", ModulatorSpec::Kind::Random}, {"grating", ModulatorSpec::Kind::Grating}}, s.qualified("kind"));
  m.feature_px = s.get<int>("feature_px", m.feature_px);
  m.phase_depth = s.get<double>("phase_depth", m.phase_depth);
  m.density = s.get<double>("density", m.density);
  m.period_px = s.get<double>("period_px", m.period_px);
  m.seed = s.get<std::uint64_t>("seed", m.seed);
  if (m.feature_px < 1)
    throw ConfigError("config: '" + s.qualified("feature_px") + "' must be at least 1");
  if (m.kind == ModulatorSpec::Kind::Grating && !(m.period_px > 0.0))
    throw ConfigError("config: '" + s.qualified("period_px") + "' must be positive for a grating");
  s.finish();
  return m;
}

ScanSection parse_scan(Section s, ScanSection sc) {
  sc.rows = s.get<int>("rows", sc.rows);
  sc.cols = s.get<int>("cols", sc.cols);
  sc.overlap = s.get<double>("overlap", sc.overlap);
  sc.step_px = s.get<double>("step_px", sc.step_px);
  sc.jitter_px = s.get<double>("jitter_px", sc.jitter_px);
  sc.seed = s.get<std::uint64_t>("seed", sc.seed);
  sc.sparse_stride = s.get<int>("sparse_stride", sc.sparse_stride);
  if (sc.rows < 1 || sc.cols < 1)
    throw ConfigError("config: '" + s.qualified("rows") + "' and 'cols' must be at least 1");
  if (sc.step_px <= 0.0 && !(sc.overlap > 0.0 && sc.overlap < 1.0))
    throw ConfigError("config: '" + s.qualified("overlap") + "' must lie in (0, 1) when step_px is not given");
  if (sc.jitter_px < 0.0)
    throw ConfigError("config: '" + s.qualified("jitter_px") + "' must be non-negative");
  if (sc.sparse_stride < 1)
    throw ConfigError("config: '" + s.qualified("sparse_stride") + "' must be at least 1");
  s.finish();
  return sc;
}

ReconMode parse_mode_key(const std::string& text, const std::string& key) {
  try {
    return parse_mode(text);
  } catch (const ConfigError&) {
    throw ConfigError("config: '" + key + "' must be one of separated, exitwave, calibrate (got '" + text + "')");
  }
}

/// Engine keys shared by the reconstruct and calibration sections.
void parse_engine(Section& s, ReconConfig& r) {
  r.iterations = s.get<int>("iterations", r.iterations);
  r.beta_object = s.get<double>("beta_object", r.beta_object);
  r.beta_probe = s.get<double>("beta_probe", r.beta_probe);
  r.beta_modulator = s.get<double>("beta_modulator", r.beta_modulator);
  r.division_epsilon = s.get<double>("division_epsilon", r.division_epsilon);
  r.unit_modulator = s.get<bool>("unit_modulator", r.unit_modulator);
  r.early_stop = s.get<bool>("early_stop", r.early_stop);
  r.early_stop_tolerance = s.get<double>("early_stop_tolerance", r.early_stop_tolerance);
  r.early_stop_window = s.get<int>("early_stop_window", r.early_stop_window);
}

ReconstructSection parse_reconstruct(Section s) {
  ReconstructSection out;
  ReconConfig& r = out.recon;
  r.mode = parse_mode_key(s.get<std::string>("mode", mode_name(r.mode)), s.qualified("mode"));
  parse_engine(s, r);
  r.update_modulator = s.get<bool>("update_modulator", r.update_modulator);
  r.update_probe = s.get<bool>("update_probe", r.update_probe);
  Section sup = s.child("support");
  r.support.radius_px = sup.get<double>("radius_px", r.support.radius_px);
  r.support.margin_fraction = sup.get<double>("margin_fraction", r.support.margin_fraction);
  r.support.outside_feedback = sup.get<double>("outside_feedback", r.support.outside_feedback);
  sup.finish();
  out.drift_compensation = s.get<bool>("drift_compensation", out.drift_compensation);
  out.separated_iterations = s.get<int>("separated_iterations", out.separated_iterations);
  out.probe_path = s.get<std::string>("probe_path", "");
  out.modulator_path = s.get<std::string>("modulator_path", "");
  s.finish();
  if (out.drift_compensation && r.mode != ReconMode::ExitWave)
    throw ConfigError("config: 'reconstruct.drift_compensation' requires mode 'exitwave'");
  if (out.separated_iterations < 1)
    throw ConfigError("config: 'reconstruct.separated_iterations' must be at least 1");
  r.validate();
  return out;
}

RegisterConfig parse_registration(Section s) {
  RegisterConfig c;
  c.precondition = s.get<bool>("precondition", c.precondition);
  c.trim_px = s.get<int>("trim_px", c.trim_px);
  c.upsample = s.get<int>("upsample", c.upsample);
  c.magnitude_only = s.get<bool>("magnitude_only", c.magnitude_only);
  c.subtract_mean = s.get<bool>("subtract_mean", c.subtract_mean);
  c.min_confidence = s.get<double>("min_confidence", c.min_confidence);
  c.min_peak_ratio = s.get<double>("min_peak_ratio", c.min_peak_ratio);
  c.exclusion_px = s.get<double>("exclusion_px", c.exclusion_px);
  c.min_overlap_fraction = s.get<double>("min_overlap_fraction", c.min_overlap_fraction);
  c.significance_ranking = s.get<bool>("significance_ranking", c.significance_ranking);
  c.coarse_blur_px = s.get<double>("coarse_blur_px", c.coarse_blur_px);
  c.candidates = s.get<int>("candidates", c.candidates);
  c.candidate_separation_px = s.get<double>("candidate_separation_px", c.candidate_separation_px);
  c.cycle_tolerance_px = s.get<double>("cycle_tolerance_px", c.cycle_tolerance_px);
  c.relative_overlap_floor = s.get<double>("relative_overlap_floor", c.relative_overlap_floor);
  c.consensus_rounds = s.get<int>("consensus_rounds", c.consensus_rounds);
  if (c.upsample < 1 || c.candidates < 1 || c.trim_px < 0 || c.consensus_rounds < 0)
    throw ConfigError("config: 'positions.registration' has out-of-range integers");
  s.finish();
  return c;
}

PositionsSection parse_positions(Section s) {
  PositionsSection p;
  p.edges = s.get<std::string>("edges", p.edges);
  if (p.edges != "auto")
    EdgeStrategy::parse(p.edges);
  p.mask_scale = s.positive("mask_scale", p.mask_scale);
  p.robust = s.get<bool>("robust", p.robust);
  p.outlier_px = s.positive("outlier_px", p.outlier_px);
  p.registration = parse_registration(s.child("registration"));
  s.finish();
  return p;
}

AssembleSection parse_assemble(Section s) {
  AssembleSection a;
  EpieConfig& e = a.epie;
  e.iterations = s.get<int>("iterations", e.iterations);
  e.beta_object = s.get<double>("beta_object", e.beta_object);
  e.beta_probe = s.get<double>("beta_probe", e.beta_probe);
  e.update_probe = s.get<bool>("update_probe", e.update_probe);
  e.division_epsilon = s.get<double>("division_epsilon", e.division_epsilon);
  e.patch_pad_px = s.get<int>("patch_pad_px", e.patch_pad_px);
  e.divergence_factor = s.get<double>("divergence_factor", e.divergence_factor);
  if (e.iterations < 0 || e.patch_pad_px < 0)
    throw ConfigError("config: 'assemble' iterations and patch_pad_px must be non-negative");
  s.finish();
  return a;
}

CalibrationSection parse_calibration(Section s) {
  CalibrationSection c;
  c.present = true;
  ProbeSpec divergent;
  divergent.kind = ProbeKind::Divergent;
  c.probe = parse_probe(s.child("probe"), divergent);
  Section d = s.child("diffuser");
  c.diffuser_size_px = d.get<int>("size_px", c.diffuser_size_px);
  c.diffuser = parse_modulator(d, ModulatorSpec{});
  ScanSection sc;
  sc.rows = 4;
  sc.cols = 5;
  sc.step_px = 30.0;
  sc.jitter_px = 3.0;
  sc.seed = 4;
  c.scan = parse_scan(s.child("scan"), sc);
  c.recon.mode = ReconMode::Calibrate;
  c.recon.update_modulator = true;
  parse_engine(s, c.recon);
  c.mask_fraction = s.positive("mask_fraction", c.mask_fraction);
  c.grating_period_px = s.get<double>("grating_period_px", c.grating_period_px);
  c.use_in_reconstruction = s.get<bool>("use_in_reconstruction", c.use_in_reconstruction);
  s.finish();
  if (c.diffuser_size_px < 16)
    throw ConfigError("config: 'calibration.diffuser.size_px' must be at least 16");
  c.recon.validate();
  return c;
}

} // namespace

void PipelineConfig::set_seed(std::uint64_t s) {
  seed = s;
  reconstruct.recon.seed = s;
  calibration.recon.seed = s;
  assemble.epie.seed = s;
}

PipelineConfig default_config() {
  PipelineConfig c;
  c.source = json::object();
  c.calibration.recon.mode = ReconMode::Calibrate;
  c.calibration.recon.update_modulator = true;
  return c;
}

PipelineConfig parse_config(const json& doc) {
  PipelineConfig c = default_config();
  c.source = doc;
  Section root(doc, "");
  c.version = root.require<int>("version");
  if (c.version != 1)
    throw ConfigError("config: unsupported version " + std::to_string(c.version) + " (expected 1)");

  SimulateSection& sim = c.simulate;
  Section geo = root.child("geometry");
  if (!root.has("geometry"))
    throw ConfigError("config: missing required key 'geometry'");
  const double wavelength = geo.require_positive("wavelength_m");
  const double z_sm = geo.require_positive("z_sm_m");
  const double z_md = geo.require_positive("z_md_m");
  const double det = geo.require_positive("detector_pitch_m");
  sim.frame_px = geo.get<int>("frame_px", sim.frame_px);
  geo.finish();
  if (sim.frame_px < 8)
    throw ConfigError("config: 'geometry.frame_px' must be at least 8");
  sim.geometry = Geometry::far_field_from(wavelength, z_sm, z_md, det, sim.frame_px);

  sim.probe = parse_probe(root.child("probe"), sim.probe);

  Section smp = root.child("sample");
  const auto kind = parse_enum<SampleSpec::Kind>(smp.get<std::string>("kind", "maze"),
                                                 {{"maze", SampleSpec::Kind::Maze}, {"import", SampleSpec::Kind::Import}},
                                                 smp.qualified("kind"));
  sim.sample.kind = kind;
  sim.sample.size = smp.get<int>("size_px", sim.sample.size);
  sim.sample.cells = smp.get<int>("cells", sim.sample.cells);
  sim.sample.wall_px = smp.get<int>("wall_px", sim.sample.wall_px);
  sim.sample.seed = smp.get<std::uint64_t>("seed", sim.sample.seed);
  sim.sample.amplitude = smp.range("amplitude", sim.sample.amplitude);
  sim.sample.phase = smp.range("phase", sim.sample.phase);
  sim.sample.amplitude_image = smp.get<std::string>("amplitude_image", "");
  sim.sample.phase_image = smp.get<std::string>("phase_image", "");
  smp.finish();
  if (sim.sample.size < sim.frame_px)
    throw ConfigError("config: 'sample.size_px' must be at least the frame size");
  if (kind == SampleSpec::Kind::Import && sim.sample.amplitude_image.empty())
    throw ConfigError("config: missing required key 'sample.amplitude_image' for an imported sample");

  sim.modulator = parse_modulator(root.child("modulator"), sim.modulator);
  sim.scan = parse_scan(root.child("scan"), sim.scan);

  Section dr = root.child("drift");
  sim.drift.kind = parse_enum<DriftModel::Kind>(
      dr.get<std::string>("kind", "none"),
      {{"none", DriftModel::Kind::None}, {"linear", DriftModel::Kind::Linear}, {"random_walk", DriftModel::Kind::RandomWalk}},
      dr.qualified("kind"));
  sim.drift.amplitude = dr.get<double>("amplitude_px", sim.drift.amplitude);
  const auto dir = dr.get<std::vector<double>>("direction", {sim.drift.direction.dy, sim.drift.direction.dx});
  if (dir.size() != 2)
    throw ConfigError("config: 'drift.direction' must be a [dy, dx] pair");
  sim.drift.direction = {dir[0], dir[1]};
  sim.drift.seed = dr.get<std::uint64_t>("seed", sim.drift.seed);
  dr.finish();

  if (root.has("photons") && !doc["photons"].is_null())
    sim.photons = root.positive("photons", 1.0);
  else
    root.get<json>("photons", nullptr);

  c.reconstruct = parse_reconstruct(root.child("reconstruct"));
  c.positions = parse_positions(root.child("positions"));
  c.assemble = parse_assemble(root.child("assemble"));
  if (root.has("calibration"))
    c.calibration = parse_calibration(root.child("calibration"));
  Section ev = root.child("evaluate");
  c.evaluate.converged_residual = ev.positive("converged_residual", c.evaluate.converged_residual);
  ev.finish();

  c.set_seed(root.get<std::uint64_t>("seed", 0));
  root.finish();
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  try {
    return parse_config(doc);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- reports

json RunReport::to_json() const {
  return {{"stage", stage}, {"config", config}, {"wall_seconds", wall_seconds}, {"metrics", metrics}, {"outputs", outputs}};
}

void write_report(const fs::path& dir, const RunReport& report) {
  write_text(dir / "report.json", report.to_json().dump(2) + "\n");
}

void prepare_output(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir))
      throw ConfigError("output path " + dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!overwrite)
        throw ConfigError("output directory " + dir.string() + " is not empty; pass --overwrite to replace it");
      for (const auto& entry : fs::directory_iterator(dir))
        fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string indexed(const char* stem, std::size_t k, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%04zu%s", stem, k, ext);
  return buf;
}

json shape_json(Shape s) { return json::array({s.rows, s.cols}); }

json recon_json(const ReconConfig& r) {
  return {{"mode", mode_name(r.mode)},
          {"iterations", r.iterations},
          {"beta_object", r.beta_object},
          {"beta_probe", r.beta_probe},
          {"beta_modulator", r.beta_modulator},
          {"support", {{"radius_px", r.support.radius_px},
                       {"margin_fraction", r.support.margin_fraction},
                       {"outside_feedback", r.support.outside_feedback}}},
          {"division_epsilon", r.division_epsilon},
          {"update_modulator", r.update_modulator},
          {"update_probe", r.update_probe},
          {"unit_modulator", r.unit_modulator},
          {"seed", r.seed}};
}

void write_residuals_csv(const fs::path& path, const std::vector<double>& residuals) {
  std::string text = "iteration,residual\n";
  for (std::size_t i = 0; i < residuals.size(); ++i)
    text += std::to_string(i) + "," + format_number(residuals[i], 12) + "\n";
  write_text(path, text);
}

ComplexField simulation_probe(const SimulateSection& sim, const ProbeSpec& spec) {
  return generate_probe({sim.frame_px, sim.frame_px}, sim.geometry.sample_plane_pitch, sim.geometry.wavelength, spec);
}

ScanPlan build_plan(const ScanSection& sc, double footprint_px) {
  const double step = sc.step_px > 0.0 ? sc.step_px : step_for_overlap(sc.overlap, footprint_px);
  return make_scan_plan(sc.rows, sc.cols, step, sc.jitter_px, sc.seed);
}

// Reconstruction directory contents.
struct LoadedRecon {
  ReconMode mode = ReconMode::Separated;
  std::vector<ComplexField> objects;
  std::vector<ComplexField> exit_waves;
  ComplexField probe;
  ComplexField modulator;
  std::vector<Shift> drift;
  double support_radius = 0.0;
  double division_epsilon = 1e-3;
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<double> residuals;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

LoadedRecon load_recon(const fs::path& dir) {
  const json st = read_json(dir / "state.json");
  LoadedRecon r;
  try {
    r.mode = parse_mode(st.at("mode").get<std::string>());
    r.support_radius = st.at("support_radius_px").get<double>();
    r.division_epsilon = st.at("config").at("division_epsilon").get<double>();
    r.residuals = st.at("residuals").get<std::vector<double>>();
    const auto n = st.at("n_frames").get<std::size_t>();
    if (st.contains("scan_grid")) {
      const auto g = st["scan_grid"].get<std::vector<int>>();
      if (g.size() == 2) {
        r.grid_rows = g[0];
        r.grid_cols = g[1];
      }
    }
    r.probe = load_cfield(dir / "probe.cfield");
    r.modulator = load_cfield(dir / "modulator.cfield");
    r.drift = read_shift_csv(dir / "drift.csv");
    if (r.drift.size() != n)
      throw ConfigError(dir.string() + ": drift.csv row count does not match n_frames");
    const bool objects = r.mode != ReconMode::ExitWave;
    for (std::size_t k = 0; k < n; ++k) {
      if (objects)
        r.objects.push_back(load_cfield(dir / indexed("object_", k, ".cfield")));
      else
        r.exit_waves.push_back(load_cfield(dir / indexed("exit_wave_", k, ".cfield")));
    }
  } catch (const json::exception& e) {
    throw ConfigError((dir / "state.json").string() + ": " + e.what());
  }
  return r;
}

/// Objects, masks and the probe they were divided by.
SeparatedObjects recon_objects(const LoadedRecon& r, double mask_scale) {
  if (!r.objects.empty()) {
    ReconState st;
    st.probe = r.probe;
    st.objects = r.objects;
    st.drift = r.drift;
    SeparatedObjects so = objects_from_state(st, mask_scale);
    so.probe = r.probe;
    return so;
  }
  const RealGrid support = disk_mask(r.probe.shape(), r.support_radius);
  return separate_probe_object(r.exit_waves, r.drift, r.division_epsilon, support,
                               probe_equivalent_radius(r.probe) * mask_scale);
}

std::vector<Shift> nonzero_or_empty(const std::vector<Shift>& drift) {
  for (const auto& d : drift)
    if (d.dy != 0.0 || d.dx != 0.0)
      return drift;
  return {};
}

void require_truth(const ScanDataset& ds, const fs::path& dir) {
  if (!ds.truth)
    throw ConfigError("dataset " + dir.string() + " has no truth/ directory; evaluation needs simulated data");
}

} // namespace

// ---------------------------------------------------------------- simulate

RunReport run_simulate(const PipelineConfig& config, const fs::path& out, bool overwrite) {
  const auto t0 = Clock::now();
  const SimulateSection& sim = config.simulate;
  sim.geometry.validate(sim.frame_px);
  const Shape frame{sim.frame_px, sim.frame_px};
  const double pitch = sim.geometry.sample_plane_pitch;

  const ComplexField probe = simulation_probe(sim, sim.probe);
  const ComplexField sample = generate_sample(sim.sample, pitch);
  const ComplexField modulator = generate_modulator(frame, pitch, sim.modulator);
  const double footprint = probe_footprint_px(probe);
  const ScanPlan plan = build_plan(sim.scan, footprint);
  validate_plan(plan, sample.shape(), frame);

  SynthesisOptions opts;
  opts.photons = sim.photons;
  opts.seed = config.seed;
  ScanDataset ds = synthesize_dataset(sample, probe, modulator, plan, sim.drift, sim.geometry, opts);
  ds.probe_spec = sim.probe;
  if (sim.scan.sparse_stride > 1)
    ds = subset_dataset(ds, sparse_grid_indices(plan, sim.scan.sparse_stride));

  prepare_output(out, overwrite);
  save_dataset(out, ds);

  RunReport rep;
  rep.stage = "simulate";
  rep.config = config.source;
  rep.metrics["n_frames"] = ds.size();
  rep.metrics["frame_shape"] = shape_json(frame);
  rep.metrics["sample_pitch_m"] = pitch;
  rep.metrics["probe_footprint_px"] = footprint;
  rep.metrics["overlap_mean"] = ds.size() > 1 ? overlap_ratio(ds.truth->plan, footprint).mean : 0.0;
  rep.outputs = {(out / "manifest.json").string(), (out / "frames.bin").string(), (out / "truth").string()};
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  return rep;
}

RunReport run_simulate_calibration(const PipelineConfig& config, const fs::path& out, bool overwrite) {
  const auto t0 = Clock::now();
  const SimulateSection& sim = config.simulate;
  const CalibrationSection& cal = config.calibration;
  if (!cal.present)
    throw ConfigError("config: missing required key 'calibration'");
  sim.geometry.validate(sim.frame_px);
  const Shape frame{sim.frame_px, sim.frame_px};
  const double pitch = sim.geometry.sample_plane_pitch;

  const ComplexField probe = simulation_probe(sim, cal.probe);
  const ComplexField diffuser = generate_modulator({cal.diffuser_size_px, cal.diffuser_size_px}, pitch, cal.diffuser);
  const ComplexField modulator = generate_modulator(frame, pitch, sim.modulator);
  const ScanPlan plan = build_plan(cal.scan, probe_footprint_px(probe));
  validate_plan(plan, diffuser.shape(), frame);

  CalibrationPlan cp;
  cp.positions = plan.positions;
  cp.probe_prior = probe;
  cp.grating_period_px = cal.grating_period_px;
  cp.validate();
  SynthesisOptions opts;
  opts.photons = sim.photons;
  opts.seed = config.seed;
  ScanDataset ds = synthesize_calibration_dataset(probe, diffuser, modulator, cp, sim.geometry, opts);
  ds.probe_spec = cal.probe;

  prepare_output(out, overwrite);
  save_dataset(out, ds);

  RunReport rep;
  rep.stage = "simulate";
  rep.config = config.source;
  rep.metrics["n_frames"] = ds.size();
  rep.metrics["frame_shape"] = shape_json(frame);
  rep.metrics["sample_pitch_m"] = pitch;
  rep.outputs = {(out / "manifest.json").string(), (out / "frames.bin").string(), (out / "truth").string()};
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  return rep;
}

// ---------------------------------------------------------------- reconstruct

RunReport run_reconstruct(const PipelineConfig& config, const fs::path& dataset, const fs::path& out, bool overwrite) {
  const auto t0 = Clock::now();
  const ReconstructSection& sec = config.reconstruct;
  const ScanDataset ds = load_dataset(dataset);
  InitOptions init;
  if (!sec.probe_path.empty())
    init.probe = load_cfield(sec.probe_path);
  if (!sec.modulator_path.empty())
    init.modulator = load_cfield(sec.modulator_path);

  ReconConfig rc = sec.recon;
  ReconState state;
  std::vector<double> exitwave_residuals;
  std::vector<Shift> drift_estimate;
  if (sec.drift_compensation) {
    const ReconState first = reconstruct(ds, rc, init);
    exitwave_residuals = first.residuals;
    drift_estimate = estimate_probe_drift(first.exit_waves, first.support).drift;
    ReconConfig second = rc;
    second.mode = ReconMode::Separated;
    second.iterations = sec.separated_iterations;
    second.support = SupportConfig{};
    init.drift = drift_estimate;
    init.probe = first.probe;
    init.modulator = first.modulator;
    state = reconstruct(ds, second, init);
    rc = second;
  } else {
    state = reconstruct(ds, rc, init);
  }

  prepare_output(out, overwrite);
  json st = {{"version", 1},
             {"mode", mode_name(rc.mode)},
             {"n_frames", ds.size()},
             {"frame_shape", shape_json(ds.frame_shape())},
             {"support_radius_px", state.support_radius},
             {"drift_compensation", sec.drift_compensation},
             {"config", recon_json(rc)},
             {"residuals", state.residuals}};
  if (sec.drift_compensation)
    st["exitwave_residuals"] = exitwave_residuals;
  if (ds.grid_rows > 0)
    st["scan_grid"] = {ds.grid_rows, ds.grid_cols};
  write_text(out / "state.json", st.dump(2) + "\n");
  save_cfield(out / "probe.cfield", state.probe);
  save_cfield(out / "modulator.cfield", state.modulator);
  const bool objects = rc.mode != ReconMode::ExitWave;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    if (objects)
      save_cfield(out / indexed("object_", k, ".cfield"), state.objects[k]);
    else
      save_cfield(out / indexed("exit_wave_", k, ".cfield"), state.exit_waves[k]);
  }
  const std::vector<Shift> drift = state.drift.empty() ? std::vector<Shift>(ds.size()) : state.drift;
  write_shift_csv(out / "drift.csv", drift);

  RunReport rep;
  rep.stage = "reconstruct";
  rep.config = config.source;
  rep.metrics["mode"] = mode_name(rc.mode);
  rep.metrics["iterations_run"] = state.residuals.size();
  rep.metrics["residual"] = state.residuals.empty() ? 0.0 : state.residuals.back();
  if (sec.drift_compensation && ds.truth && !ds.truth->drift.empty()) {
    Shift mt{}, me{};
    const std::size_t n = ds.size();
    for (std::size_t k = 0; k < n; ++k) {
      mt = mt + ds.truth->drift[k];
      me = me + drift[k];
    }
    mt = mt * (1.0 / static_cast<double>(n));
    me = me * (1.0 / static_cast<double>(n));
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const Shift d = (drift[k] - me) - (ds.truth->drift[k] - mt);
      acc += d.dy * d.dy + d.dx * d.dx;
    }
    rep.metrics["drift_rms_error_px"] = std::sqrt(acc / static_cast<double>(n));
  }
  rep.outputs = {(out / "state.json").string(), (out / "probe.cfield").string(), (out / "modulator.cfield").string(),
                 (out / "drift.csv").string()};
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  return rep;
}

// ---------------------------------------------------------------- positions

RunReport run_positions(const PipelineConfig& config, const fs::path& recon, const fs::path& dataset,
                        const fs::path& out, bool overwrite) {
  const auto t0 = Clock::now();
  const PositionsSection& sec = config.positions;
  const LoadedRecon r = load_recon(recon);
  const int n = static_cast<int>(r.drift.size());
  const SeparatedObjects so = recon_objects(r, sec.mask_scale);

  EdgeStrategy strategy;
  if (sec.edges == "auto") {
    if (r.grid_rows > 0) {
      strategy.kind = EdgeStrategy::Kind::Grid;
    } else {
      strategy.kind = EdgeStrategy::Kind::Temporal;
      strategy.k = 2;
    }
  } else {
    strategy = EdgeStrategy::parse(sec.edges);
  }
  if (strategy.kind == EdgeStrategy::Kind::Grid && strategy.rows == 0) {
    if (r.grid_rows == 0)
      throw ConfigError("edge strategy 'grid' needs the scan grid; the dataset manifest has none (use grid:RxC)");
    strategy.rows = r.grid_rows;
    strategy.cols = r.grid_cols;
  }
  const auto edges = build_edges(n, strategy);
  auto meas = measure_pairwise_shifts(so.objects, so.masks, edges, sec.registration);

  // rejection reasons with their edge counts, most frequent first
  std::map<std::string, int> reasons;
  for (const auto& m : meas)
    if (!m.accepted)
      ++reasons[m.note.empty() ? "rejected" : m.note];
  std::vector<std::pair<std::string, int>> ranked(reasons.begin(), reasons.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  prepare_output(out, overwrite);
  write_edges_csv((out / "edges.csv").string(), meas);
  try {
    require_connected(n, meas);
  } catch (const GraphError& e) {
    std::string msg = e.what();
    if (!ranked.empty()) {
      msg += "; rejected edges:";
      for (const auto& [reason, count] : ranked)
        msg += " " + std::to_string(count) + " " + reason + ";";
      msg.pop_back();
    }
    throw GraphError(msg);
  }
  const PositionSolution sol =
      sec.robust ? solve_positions_robust(n, meas, sec.outlier_px) : solve_positions(n, meas);
  write_shift_csv(out / "positions.csv", sol.positions);
  if (sec.robust)
    write_edges_csv((out / "edges.csv").string(), meas);

  RunReport rep;
  rep.stage = "positions";
  rep.config = config.source;
  rep.metrics["edge_strategy"] = strategy.str();
  rep.metrics["edges"] = meas.size();
  rep.metrics["accepted_edges"] = std::count_if(meas.begin(), meas.end(), [](const auto& m) { return m.accepted; });
  rep.metrics["cg_iterations"] = sol.cg_iterations;
  json rejected = json::object();
  for (const auto& [reason, count] : ranked)
    rejected[reason] = count;
  rep.metrics["rejected_edges"] = rejected;
  if (!dataset.empty()) {
    const ScanDataset ds = load_dataset(dataset);
    if (ds.truth && ds.truth->plan.size() == sol.positions.size()) {
      const PositionScore score = score_positions(sol.positions, ds.truth->plan.positions);
      rep.metrics["mean_position_error_px"] = score.mean;
      rep.metrics["rms_position_error_px"] = score.rms;
    }
  }
  rep.outputs = {(out / "positions.csv").string(), (out / "edges.csv").string()};
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  return rep;
}

// ---------------------------------------------------------------- assemble

RunReport run_assemble(const PipelineConfig& config, const fs::path& dataset, const fs::path& recon,
                       const fs::path& positions, const fs::path& out, bool overwrite) {
  const auto t0 = Clock::now();
  const ScanDataset ds = load_dataset(dataset);
  const LoadedRecon r = load_recon(recon);
  const std::vector<Shift> pos = read_shift_csv(positions / "positions.csv");
  if (pos.size() != ds.size() || r.drift.size() != ds.size())
    throw ConfigError("frame counts of dataset, reconstruction and positions differ");
  SeparatedObjects so = recon_objects(r, config.positions.mask_scale);
  align_object_phases(so.objects, so.masks, pos);
  const StitchedObject initial = stitch_initial(so.objects, so.masks, pos);
  const std::vector<Shift> drift = nonzero_or_empty(r.drift);
  const EpieResult er = config.assemble.epie.iterations > 0
                            ? epie_refine(ds, pos, so.probe, r.modulator, initial, config.assemble.epie, drift)
                            : EpieResult{initial, so.probe, {}};

  prepare_output(out, overwrite);
  save_cfield(out / "object_full.cfield", er.object.canvas);
  save_cfield(out / "probe.cfield", er.probe);
  write_amplitude_pgm(out / "amplitude.pgm", er.object.canvas);
  write_phase_pgm(out / "phase.pgm", er.object.canvas);
  write_residuals_csv(out / "residuals.csv", er.residuals);

  RunReport rep;
  rep.stage = "assemble";
  rep.config = config.source;
  rep.metrics["canvas_shape"] = shape_json(er.object.canvas.shape());
  if (!er.residuals.empty())
    rep.metrics["residual"] = er.residuals.back();
  if (ds.truth) {
    Shift offset{};
    for (std::size_t k = 0; k < pos.size(); ++k)
      offset = offset + (ds.truth->plan.positions[k] - pos[k]);
    offset = offset * (1.0 / static_cast<double>(pos.size()));
    const ComplexField truth = sample_on_canvas(ds.truth->sample, er.object, offset);
    const RealGrid region = scanned_region(er.object);
    rep.metrics["nrmse"] = global_phase_align(er.object.canvas, truth, region).nrmse;
    rep.metrics["nrmse_initial"] = global_phase_align(initial.canvas, truth, region).nrmse;
  }
  rep.outputs = {(out / "object_full.cfield").string(), (out / "amplitude.pgm").string(),
                 (out / "phase.pgm").string(), (out / "residuals.csv").string()};
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  return rep;
}

// ---------------------------------------------------------------- calibrate

RunReport run_calibrate(const PipelineConfig& config, const fs::path& dataset, const fs::path& probe,
                        const fs::path& out, bool overwrite) {
  const auto t0 = Clock::now();
  const CalibrationSection& cal = config.calibration;
  const ScanDataset ds = load_dataset(dataset);
  const ComplexField prior = probe.empty() ? ideal_probe(ds) : load_cfield(probe);
  const CalibrationResult res = run_calibration(ds, prior, cal.recon);

  prepare_output(out, overwrite);
  save_cfield(out / "modulator.cfield", res.modulator);
  for (std::size_t k = 0; k < res.diffusers.size(); ++k)
    save_cfield(out / indexed("diffuser_", k, ".cfield"), res.diffusers[k]);

  const ComplexField at_modulator = propagate_near(prior, ds.geometry.z_sample_to_modulator, ds.geometry.wavelength);
  const RealGrid mask = illuminated_region(at_modulator, cal.mask_fraction);
  json report = {{"residuals", res.residuals}, {"period_px", estimate_grating_period(res.modulator, mask)}};
  if (ds.truth) {
    const ModulatorScore score = score_modulator(res.modulator, ds.truth->modulator, mask);
    report["rho"] = score.rho;
    report["phase_rms_rad"] = score.phase_rms;
    report["truth_period_px"] =
        cal.grating_period_px > 0.0 ? cal.grating_period_px : estimate_grating_period(ds.truth->modulator, mask);
  }
  if (!res.warning.empty())
    report["warning"] = res.warning;
  write_text(out / "calibration_report.json", report.dump(2) + "\n");

  RunReport rep;
  rep.stage = "calibrate";
  rep.config = config.source;
  rep.metrics["residual"] = res.residuals.empty() ? 0.0 : res.residuals.back();
  for (const char* key : {"rho", "phase_rms_rad", "period_px", "truth_period_px", "warning"})
    if (report.contains(key))
      rep.metrics[key] = report[key];
  rep.outputs = {(out / "modulator.cfield").string(), (out / "calibration_report.json").string()};
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  return rep;
}

// ---------------------------------------------------------------- evaluate

RunReport run_evaluate(const PipelineConfig& config, const std::vector<EvaluationInput>& inputs, const fs::path& out,
                       bool overwrite) {
  const auto t0 = Clock::now();
  if (inputs.empty())
    throw ConfigError("evaluate needs at least one run");
  struct Row {
    double overlap = 0.0;
    PositionScore score;
    std::size_t n = 0;
    bool converged = true;
  };
  std::vector<Row> rows;
  for (const auto& in : inputs) {
    const ScanDataset ds = load_dataset(in.dataset);
    require_truth(ds, in.dataset);
    const std::vector<Shift> pos = read_shift_csv(in.positions / "positions.csv");
    if (pos.size() != ds.size())
      throw ConfigError("positions in " + in.positions.string() + " do not match the dataset frame count");
    Row row;
    row.n = pos.size();
    row.score = score_positions(pos, ds.truth->plan.positions);
    row.overlap = ds.size() > 1 ? overlap_ratio(ds.truth->plan, probe_footprint_px(ds.truth->probe)).mean : 0.0;
    if (!in.recon.empty()) {
      const json st = read_json(in.recon / "state.json");
      const auto res = st.at("residuals").get<std::vector<double>>();
      row.converged = !res.empty() && res.back() <= config.evaluate.converged_residual;
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rows[a].overlap < rows[b].overlap; });

  prepare_output(out, overwrite);
  std::string sweep = "overlap_ratio,mean_err_px,std_err_px,n_frames,converged\n";
  RunReport rep;
  rep.stage = "evaluate";
  rep.config = config.source;
  rep.outputs.push_back((out / "sweep.csv").string());
  json runs = json::array();
  for (std::size_t r = 0; r < order.size(); ++r) {
    const Row& row = rows[order[r]];
    sweep += format_number(row.overlap) + "," + format_number(row.score.mean) + "," + format_number(row.score.std) +
             "," + std::to_string(row.n) + "," + (row.converged ? "1" : "0") + "\n";
    std::string errors = "frame,dy,dx,magnitude\n";
    for (std::size_t k = 0; k < row.score.errors.size(); ++k)
      errors += std::to_string(k) + "," + format_number(row.score.errors[k].dy) + "," +
                format_number(row.score.errors[k].dx) + "," + format_number(row.score.magnitudes[k]) + "\n";
    char name[32];
    if (order.size() == 1)
      std::snprintf(name, sizeof name, "errors.csv");
    else
      std::snprintf(name, sizeof name, "errors_%02zu.csv", r);
    write_text(out / name, errors);
    rep.outputs.push_back((out / name).string());
    runs.push_back({{"overlap_ratio", row.overlap},
                    {"mean_position_error_px", row.score.mean},
                    {"std_position_error_px", row.score.std},
                    {"n_frames", row.n},
                    {"converged", row.converged}});
  }
  write_text(out / "sweep.csv", sweep);
  rep.metrics["runs"] = runs;
  if (rows.size() == 1) {
    rep.metrics["mean_position_error_px"] = rows[0].score.mean;
    rep.metrics["overlap_mean"] = rows[0].overlap;
  }
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  return rep;
}

// ---------------------------------------------------------------- pipeline

std::vector<RunReport> run_pipeline(const PipelineConfig& config, const fs::path& out, bool overwrite) {
  prepare_output(out, overwrite);
  PipelineConfig cfg = config;
  std::vector<RunReport> reports;
  if (cfg.calibration.present) {
    reports.push_back(run_simulate_calibration(cfg, out / "calibration_data", true));
    reports.push_back(run_calibrate(cfg, out / "calibration_data", {}, out / "calibration", true));
    if (cfg.calibration.use_in_reconstruction)
      cfg.reconstruct.modulator_path = out / "calibration" / "modulator.cfield";
  }
  reports.push_back(run_simulate(cfg, out / "dataset", true));
  reports.push_back(run_reconstruct(cfg, out / "dataset", out / "recon", true));
  reports.push_back(run_positions(cfg, out / "recon", out / "dataset", out / "positions", true));
  reports.push_back(run_assemble(cfg, out / "dataset", out / "recon", out / "positions", out / "assemble", true));
  reports.push_back(run_evaluate(cfg, {{out / "dataset", out / "positions", out / "recon"}}, out / "evaluate", true));
  return reports;
}

int exit_code(const std::exception& error) {
  if (dynamic_cast<const ConfigError*>(&error) || dynamic_cast<const json::exception*>(&error) ||
      dynamic_cast<const fs::filesystem_error*>(&error))
    return 2;
  if (dynamic_cast<const PhysicsError*>(&error))
    return 3;
  if (dynamic_cast<const GraphError*>(&error) || dynamic_cast<const FeaturelessError*>(&error))
    return 4;
  if (dynamic_cast<const DivergenceError*>(&error))
    return 5;
  return 1;
}

} // namespace sdi
