#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "hfdr/autograd.hpp"
#include "hfdr/blas.hpp"

namespace hfdr {

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(std::move(out), {a}, [df](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * df(in.value[i], self.value[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (self.wants_grad(k)) self.inputs[k]->grad_buffer() += self.grad;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.wants_grad(0)) self.inputs[0]->grad_buffer() += self.grad;
    if (self.wants_grad(1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (self.wants_grad(0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.wants_grad(1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& bv = self.inputs[1]->value;
    if (self.wants_grad(0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (self.wants_grad(1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / bv[i];
    }
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> one_minus(const Var<T>& a) {
  return detail::unary(a, [](T x) { return T{1} - x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// |x| with subgradient 0 at the kink.
template <typename T>
Var<T> abs(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0}); });
}

/// x^p for x >= 0.
template <typename T>
Var<T> pow_scalar(const Var<T>& a, T p) {
  if (p == T{1}) return detail::unary(a, [](T x) { return x; }, [](T, T) { return T{1}; });
  return detail::unary(
      a, [p](T x) { return std::pow(x, p); },
      [p](T x, T) { return x > T{0} ? p * std::pow(x, p - T{1}) : T{0}; });
}

/// max(x, lo); gradient is zero where the clamp is active.
template <typename T>
Var<T> clamp_min(const Var<T>& a, T lo) {
  return detail::unary(
      a, [lo](T x) { return x < lo ? lo : x; }, [lo](T x, T) { return x < lo ? T{0} : T{1}; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (auto v : a.value().values()) s += v;
  return detail::make_result<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T go = self.grad[0];
    for (auto& v : g.values()) v += go;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T inv = T{1} / T(a.size());
  T s{0};
  for (auto v : a.value().values()) s += v;
  return detail::make_result<T>(Tensor<T>::scalar(s * inv), {a}, [inv](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T go = self.grad[0] * inv;
    for (auto& v : g.values()) v += go;
  });
}

/// N x K -> N, summing each row.
template <typename T>
Var<T> row_sum(const Var<T>& a) {
  const std::size_t n = a.dim(0), k = a.size() / a.dim(0);
  Tensor<T> out({n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i] += a.value()[i * k + j];
  return detail::make_result<T>(std::move(out), {a}, [n, k](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += self.grad[i];
  });
}

enum class NormKind { l1, l2 };

/// Per-(n, c) norm of each H x W slice: N x C x H x W -> N x C.
template <typename T>
Var<T> slice_norm(const Var<T>& a, NormKind kind) {
  require_rank4(a.value(), "slice_norm");
  const std::size_t nc = a.dim(0) * a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out({a.dim(0), a.dim(1)});
  const auto& av = a.value();
  for (std::size_t s = 0; s < nc; ++s) {
    T acc{0};
    for (std::size_t i = 0; i < hw; ++i) {
      const T v = av[s * hw + i];
      acc += kind == NormKind::l2 ? v * v : std::abs(v);
    }
    out[s] = kind == NormKind::l2 ? std::sqrt(acc) : acc;
  }
  return detail::make_result<T>(std::move(out), {a}, [nc, hw, kind](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t s = 0; s < nc; ++s) {
      const T go = self.grad[s];
      if (kind == NormKind::l2) {
        const T norm = self.value[s];
        if (norm == T{0}) continue;
        for (std::size_t i = 0; i < hw; ++i) g[s * hw + i] += go * in.value[s * hw + i] / norm;
      } else {
        for (std::size_t i = 0; i < hw; ++i) {
          const T v = in.value[s * hw + i];
          g[s * hw + i] += go * (v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (bias-free, square kernels, zero padding)

namespace detail {

struct ConvGeom {
  std::size_t c, h, w, k, stride, pad, oh, ow;
  std::size_t col_rows() const { return c * k * k; }
  std::size_t col_cols() const { return oh * ow; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

/// Output columns [lo, hi) whose input column ox * stride + j - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t j, const ConvGeom& g) {
  const long pj = long(j) - long(g.pad), s = long(g.stride);
  long lo = pj >= 0 ? 0 : (-pj + s - 1) / s;
  long hi = (long(g.w) - pj + s - 1) / s;
  hi = std::clamp(hi, 0L, long(g.ow));
  lo = std::min(lo, hi);
  return {std::size_t(lo), std::size_t(hi)};
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.k; ++i)
      for (std::size_t j = 0; j < g.k; ++j) {
        T* row = col + ((c * g.k + i) * g.k + j) * g.oh * g.ow;
        const auto [lo, hi] = valid_range(j, g);
        const long pj = long(j) - long(g.pad);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = long(oy * g.stride + i) - long(g.pad);
          T* dst = row + oy * g.ow;
          if (y < 0 || y >= long(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = x + (c * g.h + std::size_t(y)) * g.w;
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1) {
            std::copy(src + long(lo) + pj, src + long(hi) + pj, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[long(ox * g.stride) + pj];
          }
          std::fill(dst + hi, dst + g.ow, T{0});
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.k; ++i)
      for (std::size_t j = 0; j < g.k; ++j) {
        const T* row = col + ((c * g.k + i) * g.k + j) * g.oh * g.ow;
        const auto [lo, hi] = valid_range(j, g);
        const long pj = long(j) - long(g.pad);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = long(oy * g.stride + i) - long(g.pad);
          if (y < 0 || y >= long(g.h)) continue;
          T* dst = x + (c * g.h + std::size_t(y)) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[long(ox * g.stride) + pj] += src[ox];
        }
      }
}

}  // namespace detail

/// x: N x C x H x W, w: O x C x k x k -> N x O x OH x OW.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride = 1, std::size_t pad = 0) {
  require_rank4(x.value(), "conv2d input");
  require_rank4(w.value(), "conv2d weight");
  const std::size_t n = x.dim(0), o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != x.dim(1) || w.dim(3) != k)
    throw ArgumentError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                        shape_str(x.shape()));
  if (x.dim(2) + 2 * pad < k || x.dim(3) + 2 * pad < k || stride == 0)
    throw ArgumentError("conv2d: kernel larger than padded input");
  detail::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad,
                     (x.dim(2) + 2 * pad - k) / stride + 1, (x.dim(3) + 2 * pad - k) / stride + 1};
  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  Tensor<T> out({n, o, g.oh, g.ow});
  std::vector<T> col(g.pointwise() ? 0 : rows * cols);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = x.value().data() + b * g.c * g.h * g.w;
    const T* src = xb;
    if (!g.pointwise()) {
      detail::im2col(xb, g, col.data());
      src = col.data();
    }
    blas::gemm(false, false, int(o), int(cols), int(rows), T{1}, w.value().data(), int(rows), src,
               int(cols), T{0}, out.data() + b * o * cols, int(cols));
  }
  return detail::make_result<T>(std::move(out), {x, w}, [g, n, o](Node<T>& self) {
    auto& xin = *self.inputs[0];
    auto& win = *self.inputs[1];
    const std::size_t rows = g.col_rows(), cols = g.col_cols();
    const bool gx = self.wants_grad(0), gw = self.wants_grad(1);
    std::vector<T> col(g.pointwise() ? 0 : rows * cols);
    std::vector<T> dcol(g.pointwise() || !gx ? 0 : rows * cols);
    for (std::size_t b = 0; b < n; ++b) {
      const T* dy = self.grad.data() + b * o * cols;
      if (gw) {
        const T* xb = xin.value.data() + b * g.c * g.h * g.w;
        const T* src = xb;
        if (!g.pointwise()) {
          detail::im2col(xb, g, col.data());
          src = col.data();
        }
        blas::gemm(false, true, int(o), int(rows), int(cols), T{1}, dy, int(cols), src, int(cols),
                   T{1}, win.grad_buffer().data(), int(rows));
      }
      if (gx) {
        T* dxb = xin.grad_buffer().data() + b * g.c * g.h * g.w;
        if (g.pointwise()) {
          blas::gemm(true, false, int(rows), int(cols), int(o), T{1}, win.value.data(), int(rows),
                     dy, int(cols), T{1}, dxb, int(cols));
        } else {
          blas::gemm(true, false, int(rows), int(cols), int(o), T{1}, win.value.data(), int(rows),
                     dy, int(cols), T{0}, dcol.data(), int(cols));
          detail::col2im_add(dcol.data(), g, dxb);
        }
      }
    }
  });
}

/// Fixed (non-trainable) depthwise filtering with a bank of K odd square
/// integer-tap kernels, each followed by a scale factor; zero padding,
/// stride 1. Output channel k*C + c holds kernel k applied to channel c.
template <typename T>
Var<T> depthwise_fixed(const Var<T>& x, const std::vector<Tensor<T>>& taps,
                       const std::vector<T>& scales) {
  require_rank4(x.value(), "depthwise_fixed");
  if (taps.size() != scales.size()) throw ArgumentError("depthwise_fixed: taps/scales mismatch");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), nk = taps.size();
  struct Tap {
    long dy, dx;
    T v;
  };
  // Sparse: several residual kernels are mostly zeros.
  std::vector<std::vector<Tap>> sparse(nk);
  for (std::size_t k = 0; k < nk; ++k) {
    const auto& ker = taps[k];
    const std::size_t ks = ker.dim(0);
    const long r = long(ks / 2);
    for (std::size_t i = 0; i < ks; ++i)
      for (std::size_t j = 0; j < ks; ++j)
        if (ker(i, j) != T{0}) sparse[k].push_back({long(i) - r, long(j) - r, ker(i, j)});
  }
  const long lh = long(h), lw = long(w);
  // dst[y, x] += scale * sum_t v_t * src[y + dy_t, x + dx_t]  (offsets negated when flip).
  auto apply = [lh, lw](const T* src, T* dst, const std::vector<Tap>& tp, T scale, bool flip,
                        std::vector<T>& acc) {
    std::fill(acc.begin(), acc.end(), T{0});
    for (const auto& t : tp) {
      const long dy = flip ? -t.dy : t.dy, dx = flip ? -t.dx : t.dx;
      const long y0 = std::max(0L, -dy), y1 = std::min(lh, lh - dy);
      const long x0 = std::max(0L, -dx), x1 = std::min(lw, lw - dx);
      for (long y = y0; y < y1; ++y) {
        const T* s = src + (y + dy) * lw + dx;
        T* d = acc.data() + y * lw;
        for (long xx = x0; xx < x1; ++xx) d[xx] += t.v * s[xx];
      }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] += scale * acc[i];
  };
  Tensor<T> out({n, nk * c, h, w});
  const std::size_t plane = h * w;
  std::vector<T> acc(plane);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < nk; ++k)
      for (std::size_t ch = 0; ch < c; ++ch)
        apply(x.value().data() + (b * c + ch) * plane, out.data() + ((b * nk + k) * c + ch) * plane,
              sparse[k], scales[k], false, acc);
  return detail::make_result<T>(std::move(out), {x}, [=](Node<T>& self) mutable {
    auto& g = self.inputs[0]->grad_buffer();
    std::vector<T> buf(plane);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t k = 0; k < nk; ++k)
        for (std::size_t ch = 0; ch < c; ++ch)
          apply(self.grad.data() + ((b * nk + k) * c + ch) * plane, g.data() + (b * c + ch) * plane,
                sparse[k], scales[k], true, buf);
  });
}

// ---------------------------------------------------------------------------
// Normalization, pooling, dense

/// Batch normalization over (N, H, W) per channel. Running statistics are
/// updated in place when `update_stats` is set (training mode).
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, bool update_stats, T momentum = T(0.1),
                  T eps = T(1e-5)) {
  require_rank4(x.value(), "batch_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), m = n * hw;
  if (gamma.size() != c || running_mean.size() != c)
    throw ArgumentError("batch_norm: channel mismatch for input " + shape_str(x.shape()));
  std::vector<T> mu(c), inv_std(c);
  const auto& xv = x.value();
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0, ss = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mean = s / double(m);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      const double var = ss / double(m);
      mu[ch] = T(mean);
      inv_std[ch] = T(1.0 / std::sqrt(var + double(eps)));
      if (update_stats) {
        const double unbiased = m > 1 ? ss / double(m - 1) : var;
        running_mean[ch] = T((1 - double(momentum)) * running_mean[ch] + double(momentum) * mean);
        running_var[ch] = T((1 - double(momentum)) * running_var[ch] + double(momentum) * unbiased);
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      inv_std[ch] = T{1} / std::sqrt(running_var[ch] + eps);
    }
  }
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = xv.data() + (b * c + ch) * hw;
      T* q = out.data() + (b * c + ch) * hw;
      const T sc = gamma.value()[ch] * inv_std[ch], sh = beta.value()[ch] - mu[ch] * sc;
      for (std::size_t i = 0; i < hw; ++i) q[i] = p[i] * sc + sh;
    }
  return detail::make_result<T>(
      std::move(out), {x, gamma, beta},
      [=, mu = std::move(mu), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& gv = self.inputs[1]->value;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sdy = 0, sdyx = 0;
          for (std::size_t b = 0; b < n; ++b) {
            const T* dy = self.grad.data() + (b * c + ch) * hw;
            const T* p = xv.data() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sdy += dy[i];
              sdyx += dy[i] * (p[i] - mu[ch]) * inv_std[ch];
            }
          }
          if (self.wants_grad(1)) self.inputs[1]->grad_buffer()[ch] += T(sdyx);
          if (self.wants_grad(2)) self.inputs[2]->grad_buffer()[ch] += T(sdy);
          if (!self.wants_grad(0)) continue;
          auto& gx = self.inputs[0]->grad_buffer();
          const T scale = gv[ch] * inv_std[ch];
          for (std::size_t b = 0; b < n; ++b) {
            const T* dy = self.grad.data() + (b * c + ch) * hw;
            const T* p = xv.data() + (b * c + ch) * hw;
            T* dx = gx.data() + (b * c + ch) * hw;
            if (training) {
              const T a = T(sdy / double(m)), bq = T(sdyx / double(m));
              for (std::size_t i = 0; i < hw; ++i)
                dx[i] += scale * (dy[i] - a - (p[i] - mu[ch]) * inv_std[ch] * bq);
            } else {
              for (std::size_t i = 0; i < hw; ++i) dx[i] += scale * dy[i];
            }
          }
        }
      });
}

/// N x C x H x W -> N x C.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank4(x.value(), "global_avg_pool");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1)});
  for (std::size_t s = 0; s < nc; ++s) {
    T acc{0};
    for (std::size_t i = 0; i < hw; ++i) acc += x.value()[s * hw + i];
    out[s] = acc / T(hw);
  }
  return detail::make_result<T>(std::move(out), {x}, [nc, hw](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t s = 0; s < nc; ++s) {
      const T v = self.grad[s] / T(hw);
      for (std::size_t i = 0; i < hw; ++i) g[s * hw + i] += v;
    }
  });
}

/// Collapses all trailing dimensions: N x ... -> N x D.
template <typename T>
Var<T> flatten(const Var<T>& x) {
  const std::size_t n = x.dim(0);
  return detail::make_result<T>(x.value().reshaped({n, x.size() / n}), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// x: N x D, w: O x D, b: O -> N x O.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const std::size_t n = x.dim(0), d = x.dim(1), o = w.dim(0);
  if (x.value().rank() != 2 || w.dim(1) != d || b.size() != o)
    throw ArgumentError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                        shape_str(w.shape()));
  Tensor<T> out({n, o});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) out[i * o + j] = b.value()[j];
  blas::gemm(false, true, int(n), int(o), int(d), T{1}, x.value().data(), int(d), w.value().data(),
             int(d), T{1}, out.data(), int(o));
  return detail::make_result<T>(std::move(out), {x, w, b}, [n, d, o](Node<T>& self) {
    if (self.wants_grad(0))
      blas::gemm(false, false, int(n), int(d), int(o), T{1}, self.grad.data(), int(o),
                 self.inputs[1]->value.data(), int(d), T{1},
                 self.inputs[0]->grad_buffer().data(), int(d));
    if (self.wants_grad(1))
      blas::gemm(true, false, int(o), int(d), int(n), T{1}, self.grad.data(), int(o),
                 self.inputs[0]->value.data(), int(d), T{1},
                 self.inputs[1]->grad_buffer().data(), int(d));
    if (self.wants_grad(2)) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < o; ++j) gb[j] += self.grad[i * o + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Class-score ops (logits are N x K)

template <typename T>
Var<T> log_softmax(const Var<T>& z) {
  if (z.value().rank() != 2) throw ArgumentError("log_softmax expects N x K logits");
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor<T> out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const T* zi = z.value().data() + i * k;
    const T mx = *std::max_element(zi, zi + k);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += std::exp(zi[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = zi[j] - lse;
  }
  return detail::make_result<T>(std::move(out), {z}, [n, k](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      T s{0};
      for (std::size_t j = 0; j < k; ++j) s += self.grad[i * k + j];
      for (std::size_t j = 0; j < k; ++j)
        g[i * k + j] += self.grad[i * k + j] - std::exp(self.value[i * k + j]) * s;
    }
  });
}

namespace detail {
inline void check_labels(std::span<const int> labels, std::size_t n, std::size_t k) {
  if (labels.size() != n)
    throw ArgumentError("label count " + std::to_string(labels.size()) + " != batch size " +
                        std::to_string(n));
  for (int y : labels)
    if (y < 0 || std::size_t(y) >= k)
      throw ArgumentError("label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
}
}  // namespace detail

/// out[n] = z[n, y_n].
template <typename T>
Var<T> pick(const Var<T>& z, std::span<const int> labels) {
  const std::size_t n = z.dim(0), k = z.dim(1);
  detail::check_labels(labels, n, k);
  Tensor<T> out({n});
  std::vector<int> ys(labels.begin(), labels.end());
  for (std::size_t i = 0; i < n; ++i) out[i] = z.value()[i * k + std::size_t(ys[i])];
  return detail::make_result<T>(std::move(out), {z}, [k, ys = std::move(ys)](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ys.size(); ++i) g[i * k + std::size_t(ys[i])] += self.grad[i];
  });
}

/// out[n] = max_{j != y_n} z[n, j]; gradient routed to the first maximizer.
template <typename T>
Var<T> max_excluding(const Var<T>& z, std::span<const int> labels) {
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (k < 2) throw ArgumentError("max_excluding needs at least 2 classes");
  detail::check_labels(labels, n, k);
  Tensor<T> out({n});
  std::vector<std::size_t> arg(n);
  for (std::size_t i = 0; i < n; ++i) {
    T best = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (int(j) == labels[i]) continue;
      if (z.value()[i * k + j] > best) {
        best = z.value()[i * k + j];
        arg[i] = j;
      }
    }
    out[i] = best;
  }
  return detail::make_result<T>(std::move(out), {z}, [k, arg = std::move(arg)](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[i * k + arg[i]] += self.grad[i];
  });
}

}  // namespace hfdr
