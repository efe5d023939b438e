#include "sdi/dataset.hpp"

#include "sdi/binary.hpp"
#include "sdi/errors.hpp"
#include "sdi/field_io.hpp"
#include "sdi/table_io.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <set>

namespace sdi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

const char* probe_kind_name(ProbeKind k) { return k == ProbeKind::Aperture ? "aperture" : "divergent"; }

json manifest_of(const ScanDataset& ds) {
  const Shape s = ds.frame_shape();
  json m;
  m["version"] = kManifestVersion;
  m["n_frames"] = ds.size();
  m["frame_shape"] = {s.rows, s.cols};
  m["wavelength_m"] = ds.geometry.wavelength;
  m["z_sm_m"] = ds.geometry.z_sample_to_modulator;
  m["z_md_m"] = ds.geometry.z_modulator_to_detector;
  m["detector_pitch_m"] = ds.geometry.detector_pitch;
  m["sample_pitch_m"] = ds.geometry.sample_plane_pitch;
  m["far_field"] = ds.geometry.far_field;
  m["photons"] = std::isfinite(ds.photons) ? json(ds.photons) : json(nullptr);
  m["seed"] = ds.seed;
  m["has_truth"] = ds.truth.has_value();
  if (ds.probe_spec) {
    m["probe"] = {{"kind", probe_kind_name(ds.probe_spec->kind)},
                  {"diameter_m", ds.probe_spec->diameter},
                  {"defocus_m", ds.probe_spec->defocus},
                  {"focal_m", ds.probe_spec->focal}};
  }
  if (ds.grid_rows > 0)
    m["scan_grid"] = {ds.grid_rows, ds.grid_cols};
  return m;
}

template <typename T>
T require(const json& m, const char* key) {
  if (!m.contains(key))
    throw ConfigError(std::string("manifest.json: missing key '") + key + "'");
  try {
    return m.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest.json: bad value for '") + key + "': " + e.what());
  }
}

} // namespace

void save_dataset(const fs::path& dir, const ScanDataset& ds) {
  ds.validate();
  fs::create_directories(dir);
  write_text(dir / "manifest.json", manifest_of(ds).dump(2) + "\n");

  std::ofstream frames(dir / "frames.bin", std::ios::binary | std::ios::trunc);
  if (!frames)
    throw Error("cannot write frames.bin");
  std::vector<float> buf;
  for (const auto& f : ds.frames) {
    buf.assign(f.values().begin(), f.values().end());
    frames.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!frames)
    throw Error("failed writing frames.bin");

  if (ds.truth) {
    const fs::path t = dir / "truth";
    fs::create_directories(t);
    save_cfield(t / "sample.cfield", ds.truth->sample);
    save_cfield(t / "probe.cfield", ds.truth->probe);
    save_cfield(t / "modulator.cfield", ds.truth->modulator);
    write_shift_csv(t / "positions.csv", ds.truth->plan.positions);
    write_shift_csv(t / "drift.csv", ds.truth->drift);
  }
}

ScanDataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in)
    throw ConfigError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest.json: ") + e.what());
  }
  static const std::set<std::string> known = {"version",      "n_frames",  "frame_shape",      "wavelength_m",
                                              "z_sm_m",       "z_md_m",    "detector_pitch_m", "sample_pitch_m",
                                              "far_field",    "photons",   "seed",             "has_truth",
                                              "probe",        "scan_grid"};
  for (const auto& [key, value] : m.items())
    if (!known.count(key))
      throw ConfigError("manifest.json: unknown key '" + key + "'");
  if (require<int>(m, "version") != kManifestVersion)
    throw ConfigError("manifest.json: unsupported version");

  ScanDataset ds;
  const auto n = require<std::size_t>(m, "n_frames");
  const auto shape = require<std::vector<int>>(m, "frame_shape");
  if (shape.size() != 2 || shape[0] <= 0 || shape[1] <= 0)
    throw ConfigError("manifest.json: frame_shape must be [rows, cols]");
  ds.geometry.wavelength = require<double>(m, "wavelength_m");
  ds.geometry.z_sample_to_modulator = require<double>(m, "z_sm_m");
  ds.geometry.z_modulator_to_detector = require<double>(m, "z_md_m");
  ds.geometry.detector_pitch = require<double>(m, "detector_pitch_m");
  ds.geometry.sample_plane_pitch = require<double>(m, "sample_pitch_m");
  ds.geometry.far_field = m.value("far_field", true);
  if (!m.contains("photons"))
    throw ConfigError("manifest.json: missing key 'photons'");
  ds.photons = m["photons"].is_null() ? std::numeric_limits<double>::infinity() : m["photons"].get<double>();
  ds.seed = require<std::uint64_t>(m, "seed");
  const bool has_truth = require<bool>(m, "has_truth");
  if (m.contains("probe")) {
    const auto& p = m["probe"];
    ProbeSpec spec;
    spec.kind = p.value("kind", std::string("aperture")) == "divergent" ? ProbeKind::Divergent : ProbeKind::Aperture;
    spec.diameter = p.at("diameter_m").get<double>();
    spec.defocus = p.value("defocus_m", 0.0);
    spec.focal = p.value("focal_m", spec.focal);
    ds.probe_spec = spec;
  }
  if (m.contains("scan_grid")) {
    const auto g = m["scan_grid"].get<std::vector<int>>();
    if (g.size() == 2) {
      ds.grid_rows = g[0];
      ds.grid_cols = g[1];
    }
  }

  std::ifstream frames(dir / "frames.bin", std::ios::binary);
  if (!frames)
    throw ConfigError("no frames.bin in " + dir.string());
  std::vector<float> buf(static_cast<std::size_t>(shape[0]) * shape[1]);
  ds.frames.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (!frames.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw ConfigError("frames.bin is shorter than n_frames * frame size");
    RealGrid f(shape[0], shape[1]);
    std::copy(buf.begin(), buf.end(), f.values().begin());
    ds.frames.push_back(std::move(f));
  }
  if (frames.peek() != std::char_traits<char>::eof())
    throw ConfigError("frames.bin is longer than n_frames * frame size");

  if (has_truth) {
    const fs::path t = dir / "truth";
    Truth truth;
    truth.sample = load_cfield(t / "sample.cfield");
    truth.probe = load_cfield(t / "probe.cfield");
    truth.modulator = load_cfield(t / "modulator.cfield");
    truth.plan.positions = read_shift_csv(t / "positions.csv");
    truth.plan.grid_rows = ds.grid_rows;
    truth.plan.grid_cols = ds.grid_cols;
    truth.drift = read_shift_csv(t / "drift.csv");
    if (truth.plan.size() != n || truth.drift.size() != n)
      throw ConfigError("truth positions/drift do not match n_frames");
    ds.truth = std::move(truth);
  }
  ds.validate();
  return ds;
}

ScanDataset subset_dataset(const ScanDataset& ds, const std::vector<int>& frames) {
  ScanDataset out;
  out.geometry = ds.geometry;
  out.photons = ds.photons;
  out.seed = ds.seed;
  out.probe_spec = ds.probe_spec;
  for (int i : frames)
    out.frames.push_back(ds.frames.at(i));
  if (ds.truth) {
    Truth t{ds.truth->sample, ds.truth->probe, ds.truth->modulator, {}, {}};
    for (int i : frames) {
      t.plan.positions.push_back(ds.truth->plan.positions.at(i));
      t.drift.push_back(ds.truth->drift.at(i));
    }
    out.truth = std::move(t);
  }
  // A strided raster subset is itself a raster.
  if (ds.grid_rows > 0) {
    std::set<int> rows, cols;
    for (int i : frames) {
      rows.insert(i / ds.grid_cols);
      cols.insert(i % ds.grid_cols);
    }
    if (rows.size() * cols.size() == frames.size()) {
      out.grid_rows = static_cast<int>(rows.size());
      out.grid_cols = static_cast<int>(cols.size());
    }
  }
  if (out.truth) {
    out.truth->plan.grid_rows = out.grid_rows;
    out.truth->plan.grid_cols = out.grid_cols;
  }
  return out;
}

} // namespace sdi
