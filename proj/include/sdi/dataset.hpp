#pragma once

#include "sdi/simulate.hpp"

#include <filesystem>

namespace sdi {

// Dataset directory layout:
//   manifest.json   geometry, photons, seed, has_truth (+ probe and scan_grid hints)
//   frames.bin      n*H*W float32 LE, frame-major, row-major
//   truth/          sample.cfield probe.cfield modulator.cfield positions.csv drift.csv

void save_dataset(const std::filesystem::path& dir, const ScanDataset& ds);
ScanDataset load_dataset(const std::filesystem::path& dir);

/// Keep only the listed frames (truth positions/drift follow).
ScanDataset subset_dataset(const ScanDataset& ds, const std::vector<int>& frames);

} // namespace sdi
