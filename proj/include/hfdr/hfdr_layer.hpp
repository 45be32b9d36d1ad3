#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <utility>

#include "hfdr/freq_filters.hpp"
#include "hfdr/ops.hpp"

namespace hfdr {

/// Three bias-free 3x3 C->C convolutions with ReLU between them.
template <typename T>
struct RecalNetParams {
  std::array<Var<T>, 3> weights;

  std::size_t channels() const { return weights[0].dim(0); }
};

template <typename T>
struct HfdrParams {
  Var<T> align;  // C x 3C x 1 x 1
  RecalNetParams<T> recal;
  T tau = T{1};
  bool noise_enabled = false;
  // Diagnostic override: replaces A_HF by a constant (no gradient).
  std::optional<T> forced_attention;

  std::size_t channels() const { return align.dim(0); }

  void validate(std::size_t c) const {
    if (!(tau > T{0})) throw ArgumentError("hfdr: tau must be positive");
    if (align.dim(0) != c || align.dim(1) != 3 * c)
      throw ConfigError("hfdr: align weight " + shape_str(align.shape()) + " does not fit " +
                        std::to_string(c) + " channels");
    for (const auto& w : recal.weights)
      if (w.shape() != Shape{c, c, 3, 3})
        throw ConfigError("hfdr: recalibration weight " + shape_str(w.shape()) + " does not fit " +
                          std::to_string(c) + " channels");
  }

  /// Kaiming-uniform (fan-in) align and first two recalibration layers; the
  /// last recalibration layer starts at zero so the block initially passes
  /// only the low-frequency branch.
  static HfdrParams init(std::size_t c, Rng& rng, T tau = T{1}) {
    HfdrParams p;
    p.tau = tau;
    const T align_bound = std::sqrt(T{3} / T(3 * c));
    p.align = Var<T>(uniform_tensor<T>({c, 3 * c, 1, 1}, -align_bound, align_bound, rng), true);
    const T relu_bound = std::sqrt(T{6} / T(9 * c));
    for (std::size_t l = 0; l < 2; ++l)
      p.recal.weights[l] = Var<T>(uniform_tensor<T>({c, c, 3, 3}, -relu_bound, relu_bound, rng), true);
    p.recal.weights[2] = Var<T>(Tensor<T>({c, c, 3, 3}), true);
    return p;
  }

  /// align + three recalibration layers.
  static std::size_t parameter_count(std::size_t c) { return 3 * c * c + 3 * 9 * c * c; }
};

namespace detail {

template <typename T>
T log_sigmoid(T v) {
  // -softplus(-v), stable for both signs.
  return -(std::max(-v, T{0}) + std::log1p(std::exp(-std::abs(v))));
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
T standard_gumbel(Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double u = 0.0;
  while (u <= 0.0) u = u01(rng);
  return T(-std::log(-std::log(u)));
}

/// g_HF - g_LF for independent standard Gumbels, i.e. a standard logistic
/// variate log(u / (1 - u)). One uniform per element instead of two.
template <typename T>
T gumbel_difference(Rng& rng) {
  double u = 0.0;
  while (u <= 0.0) u = double(rng() >> 11) * 0x1.0p-53;
  return T(std::log(u) - std::log1p(-u));
}

}  // namespace detail

/// Two-class Gumbel-Softmax over logits log sigmoid(x_hf) and
/// log sigmoid(x - x_hf). Returns (A_HF, A_LF) with A_LF = 1 - A_HF.
template <typename T>
std::pair<Var<T>, Var<T>> frequency_attention(const Var<T>& x, const Var<T>& x_hf, T tau,
                                              bool noise_enabled, Rng* rng) {
  x.value().check_same(x_hf.value(), "frequency_attention");
  if (!(tau > T{0})) throw ArgumentError("frequency_attention: tau must be positive");
  if (noise_enabled && !rng) throw ArgumentError("frequency_attention: noise requires a random source");
  const std::size_t n = x.size();
  std::vector<T> noise;  // g_HF - g_LF per element
  if (noise_enabled) {
    noise.resize(n);
    for (std::size_t i = 0; i < n; ++i) noise[i] = detail::gumbel_difference<T>(*rng);
  }
  Tensor<T> a(x.shape());
  const auto& xv = x.value();
  const auto& hv = x_hf.value();
  for (std::size_t i = 0; i < n; ++i) {
    const T lf = xv[i] - hv[i];
    T z = detail::log_sigmoid(hv[i]) - detail::log_sigmoid(lf);
    if (noise_enabled) z += noise[i];
    a[i] = detail::sigmoid_scalar(z / tau);
  }
  Var<T> a_hf = detail::make_result<T>(std::move(a), {x, x_hf}, [tau](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& hv = self.inputs[1]->value;
    const bool gx = self.wants_grad(0), gh = self.wants_grad(1);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const T av = self.value[i];
      const T dz = self.grad[i] * av * (T{1} - av) / tau;
      if (dz == T{0}) continue;
      // d log sigmoid(v) / dv = sigmoid(-v)
      const T s_lf = detail::sigmoid_scalar(-(xv[i] - hv[i]));
      if (gh) self.inputs[1]->grad_buffer()[i] += dz * (detail::sigmoid_scalar(-hv[i]) + s_lf);
      if (gx) self.inputs[0]->grad_buffer()[i] -= dz * s_lf;
    }
  });
  return {a_hf, one_minus(a_hf)};
}

/// (x * A_HF, x * (1 - A_HF)).
template <typename T>
std::pair<Var<T>, Var<T>> disentangle(const Var<T>& x, const Var<T>& a_hf) {
  x.value().check_same(a_hf.value(), "disentangle");
  return {mul(x, a_hf), mul(x, one_minus(a_hf))};
}

/// phi(f_hf) * A_HF with phi = conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv3x3.
template <typename T>
Var<T> recalibrate(const Var<T>& f_hf, const Var<T>& a_hf, const RecalNetParams<T>& recal) {
  f_hf.value().check_same(a_hf.value(), "recalibrate");
  require_rank4(f_hf.value(), "recalibrate");
  const std::size_t c = f_hf.dim(1);
  for (const auto& w : recal.weights)
    if (w.shape() != Shape{c, c, 3, 3})
      throw ConfigError("recalibrate: weight " + shape_str(w.shape()) + " does not fit " +
                        std::to_string(c) + " channels");
  Var<T> h = relu(conv2d(f_hf, recal.weights[0], 1, 1));
  h = relu(conv2d(h, recal.weights[1], 1, 1));
  h = conv2d(h, recal.weights[2], 1, 1);
  return mul(h, a_hf);
}

template <typename T>
struct HfdrOutput {
  Var<T> fused;         // f~ = f~_HF + f_LF
  Var<T> attention_hf;  // A_HF, kept for the attention regularizer
  Var<T> attention_lf;
  Var<T> x_hf;
  Var<T> f_hf, f_lf, f_hf_recal;
};

/// apply_srm -> frequency_attention -> disentangle -> recalibrate -> fuse.
template <typename T>
HfdrOutput<T> hfdr_forward(const Var<T>& x, const HfdrParams<T>& params, Rng* rng) {
  require_rank4(x.value(), "hfdr_forward");
  params.validate(x.dim(1));
  HfdrOutput<T> out;
  out.x_hf = apply_srm(x, srm_kernels<T>(), params.align);
  if (params.forced_attention) {
    out.attention_hf = Var<T>(Tensor<T>(x.shape(), *params.forced_attention));
    out.attention_lf = one_minus(out.attention_hf);
  } else {
    std::tie(out.attention_hf, out.attention_lf) =
        frequency_attention(x, out.x_hf, params.tau, params.noise_enabled, rng);
  }
  std::tie(out.f_hf, out.f_lf) = disentangle(x, out.attention_hf);
  out.f_hf_recal = recalibrate(out.f_hf, out.attention_hf, params.recal);
  out.fused = add(out.f_hf_recal, out.f_lf);
  return out;
}

}  // namespace hfdr
