#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "hfdr/fft.hpp"
#include "hfdr/ops.hpp"

namespace hfdr {

/// Fixed bank of spatial residual kernels. Each kernel is stored as integer
/// taps times a scale so that the zero-sum property holds exactly.
template <typename T>
struct FilterBank {
  std::vector<Tensor<T>> taps;  // k x k, integer-valued
  std::vector<T> scales;

  std::size_t size() const { return taps.size(); }
  /// Effective (scaled) kernel entry.
  T value(std::size_t k, std::size_t i, std::size_t j) const { return taps[k](i, j) * scales[k]; }

  void validate() const {
    if (taps.size() != scales.size()) throw ArgumentError("filter bank: taps/scales mismatch");
    for (const auto& t : taps) {
      if (t.rank() != 2 || t.dim(0) != t.dim(1) || t.dim(0) % 2 == 0)
        throw ArgumentError("filter bank: kernels must be odd and square, got " + shape_str(t.shape()));
      T s{0};
      for (auto v : t.values()) s += v;
      if (s != T{0}) throw ArgumentError("filter bank: kernel taps must sum to zero");
    }
  }
};

/// The three SRM residual kernels: vertical second difference (1/2), the 5x5
/// "KV" square kernel (1/12) and the 3x3 square kernel embedded in 5x5 (1/4).
template <typename T>
const FilterBank<T>& srm_kernels() {
  static const FilterBank<T> bank = [] {
    FilterBank<T> b;
    b.taps.push_back(Tensor<T>({5, 5}, {0, 0, 0, 0, 0,  //
                                        0, 0, -1, 0, 0,  //
                                        0, 0, 2, 0, 0,   //
                                        0, 0, -1, 0, 0,  //
                                        0, 0, 0, 0, 0}));
    b.taps.push_back(Tensor<T>({5, 5}, {-1, 2, -2, 2, -1,   //
                                        2, -6, 8, -6, 2,    //
                                        -2, 8, -12, 8, -2,  //
                                        2, -6, 8, -6, 2,    //
                                        -1, 2, -2, 2, -1}));
    b.taps.push_back(Tensor<T>({5, 5}, {0, 0, 0, 0, 0,    //
                                        0, -1, 2, -1, 0,  //
                                        0, 2, -4, 2, 0,   //
                                        0, -1, 2, -1, 0,  //
                                        0, 0, 0, 0, 0}));
    b.scales = {T{1} / T{2}, T{1} / T{12}, T{1} / T{4}};
    b.validate();
    return b;
  }();
  return bank;
}

/// SRM residuals of every channel followed by a bias-free 1x1 projection from
/// 3C back to C channels. `align` is C x 3C x 1 x 1.
template <typename T>
Var<T> apply_srm(const Var<T>& x, const FilterBank<T>& bank, const Var<T>& align) {
  require_rank4(x.value(), "apply_srm");
  const std::size_t c = x.dim(1);
  const auto& as = align.shape();
  if (as.size() != 4 || as[0] != c || as[1] != bank.size() * c || as[2] != 1 || as[3] != 1)
    throw ConfigError("apply_srm: align weight " + shape_str(as) + " does not map " +
                      std::to_string(bank.size() * c) + " channels to " + std::to_string(c));
  return conv2d(depthwise_fixed(x, bank.taps, bank.scales), align);
}

// ---------------------------------------------------------------------------
// Spectral masks (centered / fft-shifted coordinates)

class SpectralMask {
 public:
  SpectralMask() = default;
  SpectralMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : h_(h), w_(w), keep_(h * w, fill) {}

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::uint8_t operator()(std::size_t i, std::size_t j) const { return keep_[i * w_ + j]; }
  void set(std::size_t i, std::size_t j, bool on) { keep_[i * w_ + j] = on ? 1 : 0; }
  std::size_t count() const { return std::size_t(std::count(keep_.begin(), keep_.end(), 1)); }
  const std::vector<std::uint8_t>& cells() const { return keep_; }

  /// Invariant under (u, v) -> (-u, -v) about the centre. Only such masks map
  /// real signals to real signals.
  bool is_point_symmetric() const {
    for (std::size_t i = 0; i < h_; ++i)
      for (std::size_t j = 0; j < w_; ++j)
        if ((*this)(i, j) != (*this)(mirror(i, h_), mirror(j, w_))) return false;
    return true;
  }

  bool operator==(const SpectralMask&) const = default;

  /// Rows of '0'/'1' characters, one line per row.
  void write_text(std::ostream& os) const {
    for (std::size_t i = 0; i < h_; ++i) {
      for (std::size_t j = 0; j < w_; ++j) os << char('0' + (*this)(i, j));
      os << '\n';
    }
  }

  static SpectralMask read_text(std::istream& is) {
    std::vector<std::string> rows;
    for (std::string line; std::getline(is, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (!rows.empty() && line.size() != rows.front().size())
        throw FormatError("spectral mask: ragged row " + std::to_string(rows.size()));
      if (line.find_first_not_of("01") != std::string::npos)
        throw FormatError("spectral mask: row " + std::to_string(rows.size()) + " has non-binary cells");
      rows.push_back(line);
    }
    if (rows.empty()) throw FormatError("spectral mask: empty grid");
    SpectralMask m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows[i].size(); ++j) m.set(i, j, rows[i][j] == '1');
    return m;
  }

 private:
  static std::size_t mirror(std::size_t i, std::size_t n) { return (2 * (n / 2) + n - i) % n; }

  std::size_t h_ = 0, w_ = 0;
  std::vector<std::uint8_t> keep_;
};

enum class SquareMode { keep_inside, keep_outside };

/// Centered B x B square of frequencies (keep_inside) or its complement.
inline SpectralMask dft_square_mask(std::size_t h, std::size_t w, std::size_t b, SquareMode mode) {
  if (b > std::min(h, w))
    throw ArgumentError("dft_square_mask: B=" + std::to_string(b) + " exceeds min(H,W)=" +
                        std::to_string(std::min(h, w)));
  const std::size_t r0 = h / 2 - b / 2, c0 = w / 2 - b / 2;
  SpectralMask m(h, w, mode == SquareMode::keep_inside ? 0 : 1);
  for (std::size_t i = r0; i < r0 + b; ++i)
    for (std::size_t j = c0; j < c0 + b; ++j) m.set(i, j, mode == SquareMode::keep_inside);
  return m;
}

/// Keeps the ceil(ratio * H * W) coefficients of smallest centered radius,
/// ties broken by lexicographic (u, v).
inline SpectralMask lowfreq_ratio_mask(std::size_t h, std::size_t w, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw ArgumentError("lowfreq_ratio_mask: ratio " + std::to_string(ratio) + " outside (0,1]");
  struct Coef {
    long r2, u, v;
    std::size_t i, j;
  };
  std::vector<Coef> all;
  all.reserve(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const long u = long(i) - long(h / 2), v = long(j) - long(w / 2);
      all.push_back({u * u + v * v, u, v, i, j});
    }
  std::sort(all.begin(), all.end(), [](const Coef& a, const Coef& b) {
    return std::tie(a.r2, a.u, a.v) < std::tie(b.r2, b.u, b.v);
  });
  // Guard the ceiling against representation error in ratio * H * W.
  const double target = ratio * double(h * w);
  auto keep = std::size_t(std::ceil(target - 1e-9 * double(h * w)));
  keep = std::clamp<std::size_t>(keep, 1, h * w);
  SpectralMask m(h, w);
  for (std::size_t k = 0; k < keep; ++k) m.set(all[k].i, all[k].j, true);
  return m;
}

/// Per (n, c) plane: DFT, multiply by the centered mask, inverse DFT, real
/// part. `max_imag` receives the largest discarded imaginary magnitude.
template <typename T>
Tensor<T> apply_frequency_mask(const Tensor<T>& x, const SpectralMask& mask, double* max_imag = nullptr) {
  require_rank4(x, "apply_frequency_mask");
  const std::size_t h = x.dim(2), w = x.dim(3), planes = x.dim(0) * x.dim(1);
  if (mask.height() != h || mask.width() != w)
    throw ArgumentError("apply_frequency_mask: mask " + std::to_string(mask.height()) + "x" +
                        std::to_string(mask.width()) + " vs feature " + std::to_string(h) + "x" +
                        std::to_string(w));
  std::vector<std::uint8_t> unshifted(h * w);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t l = 0; l < w; ++l)
      unshifted[k * w + l] = mask(fft::shifted_index(k, h), fft::shifted_index(l, w));
  Tensor<T> out(x.shape());
  std::vector<fft::Complex> grid(h * w);
  if (max_imag) *max_imag = 0.0;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    for (std::size_t i = 0; i < h * w; ++i) grid[i] = fft::Complex(double(src[i]), 0.0);
    fft::dft2(grid, h, w, false);
    for (std::size_t i = 0; i < h * w; ++i)
      if (!unshifted[i]) grid[i] = 0.0;
    fft::dft2(grid, h, w, true);
    T* dst = out.data() + p * h * w;
    for (std::size_t i = 0; i < h * w; ++i) dst[i] = T(grid[i].real());
    if (max_imag)
      for (std::size_t i = 0; i < h * w; ++i) *max_imag = std::max(*max_imag, std::abs(grid[i].imag()));
  }
  return out;
}

/// Power spectrum |X(u,v)|^2 of one H x W plane, in centered coordinates.
template <typename T>
std::vector<double> centered_power_spectrum(const T* plane, std::size_t h, std::size_t w) {
  std::vector<fft::Complex> grid(h * w);
  for (std::size_t i = 0; i < h * w; ++i) grid[i] = fft::Complex(double(plane[i]), 0.0);
  fft::dft2(grid, h, w, false);
  std::vector<double> out(h * w);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t l = 0; l < w; ++l)
      out[fft::shifted_index(k, h) * w + fft::shifted_index(l, w)] = std::norm(grid[k * w + l]);
  return out;
}

}  // namespace hfdr
