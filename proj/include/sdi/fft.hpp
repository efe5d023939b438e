#pragma once

#include "sdi/field.hpp"

#include <vector>

namespace sdi::fft {

enum class Direction { Forward, Inverse };

/// Unnormalized, uncentered in-place 2-D DFT (FFTW sign conventions).
void transform(Grid<cplx>& grid, Direction dir);

/// Unitary DFT with the zero frequency at pixel (rows/2, cols/2) in both
/// domains. Forward followed by Inverse is the identity.
void centered(Grid<cplx>& grid, Direction dir);
void centered(ComplexField& field, Direction dir);

/// Spatial frequencies (cycles per unit length) of a centered axis of n
/// samples at the given pitch: (k - n/2) / (n * pitch).
std::vector<double> centered_frequencies(int n, double pitch);

} // namespace sdi::fft
