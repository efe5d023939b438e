#pragma once

#include "sdi/field.hpp"

#include <filesystem>
#include <iosfwd>

namespace sdi {

// ".cfield": magic "CFLD0001", u32 rows, u32 cols (LE), f64 pitch (LE), then
// rows*cols interleaved (re, im) f32 LE values, row-major.

void write_cfield(std::ostream& out, const ComplexField& f);
ComplexField read_cfield(std::istream& in);

void save_cfield(const std::filesystem::path& path, const ComplexField& f);
ComplexField load_cfield(const std::filesystem::path& path);

/// Round every sample to float32 precision, as a save/load cycle would.
ComplexField quantize_f32(ComplexField f);

} // namespace sdi
