#include "sdi/fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace sdi::fft {

namespace {

// The FFTW planner is not thread-safe; execution of an existing plan on new
// arrays is. Plans live for the lifetime of the process.
class PlanCache {
public:
  fftw_plan get(int rows, int cols, int sign) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_tuple(rows, cols, sign);
    if (auto it = plans_.find(key); it != plans_.end())
      return it->second;
    auto* scratch = fftw_alloc_complex(static_cast<std::size_t>(rows) * cols);
    // ESTIMATE keeps the chosen algorithm, and therefore the rounding, identical run to run.
    fftw_plan plan = fftw_plan_dft_2d(rows, cols, scratch, scratch, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(scratch);
    plans_.emplace(key, plan);
    return plan;
  }

  ~PlanCache() {
    for (auto& [key, plan] : plans_)
      fftw_destroy_plan(plan);
  }

private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

PlanCache& cache() {
  static PlanCache instance;
  return instance;
}

// (-1)^(y+x) checkerboard; combined with the output phase it moves the zero
// frequency to the array center without explicit swaps.
void checkerboard(Grid<cplx>& g) {
  for (int y = 0; y < g.rows(); ++y) {
    cplx* row = &g(y, 0);
    for (int x = (y & 1); x < g.cols(); x += 2)
      row[x] = -row[x];
  }
}

} // namespace

void transform(Grid<cplx>& grid, Direction dir) {
  const int sign = dir == Direction::Forward ? FFTW_FORWARD : FFTW_BACKWARD;
  fftw_plan plan = cache().get(grid.rows(), grid.cols(), sign);
  auto* ptr = reinterpret_cast<fftw_complex*>(grid.data());
  fftw_execute_dft(plan, ptr, ptr);
}

void centered(Grid<cplx>& grid, Direction dir) {
  // For even n: shift(DFT(shift(x)))[k] = (-1)^(k + n/2) * DFT((-1)^j x[j])[k].
  checkerboard(grid);
  transform(grid, dir);
  checkerboard(grid);
  const int half_sign = ((grid.rows() / 2 + grid.cols() / 2) % 2) ? -1 : 1;
  const double scale = half_sign / std::sqrt(static_cast<double>(grid.size()));
  for (auto& v : grid.values())
    v *= scale;
}

void centered(ComplexField& field, Direction dir) { centered(field.grid(), dir); }

std::vector<double> centered_frequencies(int n, double pitch) {
  std::vector<double> f(n);
  for (int k = 0; k < n; ++k)
    f[k] = (k - n / 2) / (n * pitch);
  return f;
}

} // namespace sdi::fft
