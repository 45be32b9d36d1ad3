#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <mutex>
#include <utility>
#include <vector>

namespace hfdr::fft {

using Complex = std::complex<double>;

namespace detail {

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

// Plans are created once per grid size under a lock; execution through the
// new-array interface is thread-safe.
inline const PlanPair& plans_for(std::size_t h, std::size_t w) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, PlanPair> cache;
  std::lock_guard lock(mu);
  auto it = cache.find({h, w});
  if (it != cache.end()) return it->second;
  std::vector<Complex> buf(h * w);
  auto* p = reinterpret_cast<fftw_complex*>(buf.data());
  PlanPair pp;
  pp.forward = fftw_plan_dft_2d(int(h), int(w), p, p, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
  pp.inverse = fftw_plan_dft_2d(int(h), int(w), p, p, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
  return cache.emplace(std::make_pair(h, w), pp).first->second;
}

}  // namespace detail

/// In-place 2-D DFT of a row-major h x w grid. Forward is unnormalized,
/// inverse carries the 1/(h*w) factor.
inline void dft2(std::vector<Complex>& grid, std::size_t h, std::size_t w, bool inverse) {
  const auto& pp = detail::plans_for(h, w);
  auto* p = reinterpret_cast<fftw_complex*>(grid.data());
  fftw_execute_dft(inverse ? pp.inverse : pp.forward, p, p);
  if (inverse) {
    const double s = 1.0 / double(h * w);
    for (auto& v : grid) v *= s;
  }
}

/// Index of frequency row/column `k` once the spectrum is centered (DC lands
/// at floor(n/2)).
inline std::size_t shifted_index(std::size_t k, std::size_t n) { return (k + n / 2) % n; }

}  // namespace hfdr::fft
