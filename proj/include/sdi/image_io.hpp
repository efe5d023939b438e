#pragma once

#include "sdi/field.hpp"

#include <filesystem>

namespace sdi {

/// 16-bit binary PGM (P5, maxval 65535, big-endian samples). Values are
/// mapped linearly from [lo, hi] onto [0, 65535] and clamped.
void write_pgm16(const std::filesystem::path& path, const RealGrid& image, double lo, double hi);

/// Amplitude scaled min-max, phase mapped [-pi, pi] -> [0, 65535].
void write_amplitude_pgm(const std::filesystem::path& path, const ComplexField& f);
void write_phase_pgm(const std::filesystem::path& path, const ComplexField& f);

/// Reads binary (P5) or ASCII (P2) PGM with 8- or 16-bit samples; values
/// are returned normalized to [0, 1] by maxval.
RealGrid read_pgm(const std::filesystem::path& path);

} // namespace sdi
