#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>

#include "hfdr/fft.hpp"
#include "hfdr/losses.hpp"

namespace hfdr {

enum class AttackKind { fgsm, pgd, cw_pgd, ssa };
enum class LossForm { ce, margin, kl };

struct AttackError : std::runtime_error {
  AttackError(const std::string& what, std::size_t index)
      : std::runtime_error(what), batch_index(index) {}
  std::size_t batch_index;
};

/// L-infinity attack settings. Epsilon and alpha are in [0,1] pixel units.
struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 10;
  bool random_start = true;
  double ssa_spectrum_sigma = 0.5;
  int ssa_samples = 4;
  LossForm loss_form = LossForm::ce;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("attack: epsilon must be in [0,1]");
    if (!(alpha > 0.0)) throw ConfigError("attack: alpha must be positive");
    if (steps < 1) throw ConfigError("attack: steps must be >= 1");
    if (ssa_spectrum_sigma < 0.0) throw ConfigError("attack: ssa_spectrum_sigma must be >= 0");
    if (ssa_samples < 1) throw ConfigError("attack: ssa_samples must be >= 1");
  }

  std::string name() const {
    switch (kind) {
      case AttackKind::fgsm: return "fgsm";
      case AttackKind::pgd: return "pgd-" + std::to_string(steps);
      case AttackKind::cw_pgd: return "cw-" + std::to_string(steps);
      case AttackKind::ssa: return "ssa-" + std::to_string(steps);
    }
    return "unknown";
  }

  static AttackConfig make_fgsm(double eps) {
    AttackConfig c;
    c.kind = AttackKind::fgsm;
    c.epsilon = eps;
    c.alpha = eps > 0 ? eps : 1.0 / 255.0;
    c.steps = 1;
    c.random_start = false;
    return c;
  }
  static AttackConfig make_pgd(double eps, int steps, double alpha = 2.0 / 255.0, bool random_start = true) {
    AttackConfig c;
    c.epsilon = eps;
    c.steps = steps;
    c.alpha = alpha;
    c.random_start = random_start;
    return c;
  }
  static AttackConfig make_cw(double eps, int steps = 30, double alpha = 2.0 / 255.0) {
    AttackConfig c = make_pgd(eps, steps, alpha);
    c.kind = AttackKind::cw_pgd;
    c.loss_form = LossForm::margin;
    return c;
  }
  static AttackConfig make_ssa(double eps, int steps, double sigma, int samples) {
    AttackConfig c = make_pgd(eps, steps);
    c.kind = AttackKind::ssa;
    c.ssa_spectrum_sigma = sigma;
    c.ssa_samples = samples;
    return c;
  }
};

/// "8" means 8/255 (integer pixel convention); "0.03" is taken literally.
inline double parse_epsilon(const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("invalid epsilon '" + text + "'");
  }
  if (used != text.size()) throw ConfigError("invalid epsilon '" + text + "'");
  if (text.find_first_of(".eE") == std::string::npos) v /= 255.0;
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("epsilon '" + text + "' outside [0,1]");
  return v;
}

template <typename T>
using LogitsFn = std::function<Var<T>(const Var<T>&)>;

/// Untargeted margin max_{k != y} z_k - z_y per example.
template <typename T>
Var<T> cw_margin_loss(const Var<T>& logits, std::span<const int> labels) {
  return sub(max_excluding(logits, labels), pick(logits, labels));
}

namespace detail {

/// Clamp v into [0,1] and the closed ball |v - x0| <= eps, where the ball test
/// is evaluated in T arithmetic and therefore holds exactly afterwards.
template <typename T>
T project_ball(T v, T x0, T eps) {
  T lo = x0 - eps, hi = x0 + eps;
  while (hi - x0 > eps) hi = std::nextafter(hi, x0);
  while (x0 - lo > eps) lo = std::nextafter(lo, x0);
  v = std::min(std::max(v, lo), hi);
  return std::min(std::max(v, T{0}), T{1});
}

template <typename T>
Tensor<T> input_gradient(const LogitsFn<T>& f, const Tensor<T>& x, std::span<const int> labels,
                         LossForm form, const Tensor<T>* clean_logits) {
  Var<T> xv(x, true);
  Var<T> logits = f(xv);
  Var<T> loss;
  switch (form) {
    case LossForm::ce: loss = ce_loss(logits, labels); break;
    case LossForm::margin: loss = sum(cw_margin_loss(logits, labels)); break;
    case LossForm::kl:
      if (!clean_logits) throw ArgumentError("kl attack loss needs reference clean logits");
      loss = sum(kl_rows(Var<T>(*clean_logits), logits));
      break;
  }
  backward(loss);
  Tensor<T> g = xv.grad();
  const std::size_t per = g.size() / std::max<std::size_t>(1, g.dim(0));
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!std::isfinite(g[i]))
      throw AttackError("non-finite input gradient at batch index " + std::to_string(i / per), i / per);
  return g;
}

/// Real-valued multiplicative spectrum noise: X~ = iDFT(DFT(x) * (1 + xi)),
/// xi conjugate-symmetric so the result is real. The operator is symmetric,
/// so the same call maps gradients back.
template <typename T>
void spectrum_transform(Tensor<T>& x, const std::vector<double>& factors) {
  const std::size_t h = x.dim(2), w = x.dim(3), planes = x.dim(0) * x.dim(1);
  std::vector<fft::Complex> grid(h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    T* d = x.data() + p * h * w;
    for (std::size_t i = 0; i < h * w; ++i) grid[i] = double(d[i]);
    fft::dft2(grid, h, w, false);
    for (std::size_t i = 0; i < h * w; ++i) grid[i] *= factors[p * h * w + i];
    fft::dft2(grid, h, w, true);
    for (std::size_t i = 0; i < h * w; ++i) d[i] = T(grid[i].real());
  }
}

inline std::vector<double> spectrum_factors(const Shape& s, double sigma, Rng& rng) {
  const std::size_t h = s[2], w = s[3], planes = s[0] * s[1];
  std::normal_distribution<double> nd(0.0, sigma);
  std::vector<double> f(planes * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    double* fp = f.data() + p * h * w;
    for (std::size_t k = 0; k < h; ++k)
      for (std::size_t l = 0; l < w; ++l) {
        const std::size_t pk = (h - k) % h, pl = (w - l) % w;
        if (pk * w + pl < k * w + l)
          fp[k * w + l] = fp[pk * w + pl];
        else
          fp[k * w + l] = 1.0 + nd(rng);
      }
  }
  return f;
}

}  // namespace detail

/// Sign-gradient ascent with projection; shared by fgsm/pgd/cw_pgd/ssa.
template <typename T>
Tensor<T> run_attack(const LogitsFn<T>& f, const Tensor<T>& x0, std::span<const int> labels,
                     const AttackConfig& cfg, Rng& rng, const Tensor<T>* clean_logits = nullptr) {
  cfg.validate();
  require_rank4(x0, "attack input");
  const T eps = T(cfg.epsilon), alpha = T(cfg.alpha);
  LossForm form = cfg.loss_form;
  if (cfg.kind == AttackKind::cw_pgd) form = LossForm::margin;
  if (cfg.kind == AttackKind::fgsm) form = LossForm::ce;
  const bool random_start = cfg.kind != AttackKind::fgsm && cfg.random_start;
  const int steps = cfg.kind == AttackKind::fgsm ? 1 : cfg.steps;
  const T step = cfg.kind == AttackKind::fgsm ? eps : alpha;

  Tensor<T> x = x0;
  if (random_start && eps > T{0}) {
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = detail::project_ball(T(x0[i] + T(u(rng))), x0[i], eps);
  }
  const bool spectral = cfg.kind == AttackKind::ssa && cfg.ssa_spectrum_sigma > 0.0;
  const int samples = cfg.kind == AttackKind::ssa ? cfg.ssa_samples : 1;
  for (int s = 0; s < steps; ++s) {
    Tensor<T> g;
    if (!spectral && samples == 1) {
      g = detail::input_gradient(f, x, labels, form, clean_logits);
    } else {
      g = Tensor<T>(x.shape());
      for (int k = 0; k < samples; ++k) {
        Tensor<T> xt = x;
        std::vector<double> factors;
        if (spectral) {
          factors = detail::spectrum_factors(x.shape(), cfg.ssa_spectrum_sigma, rng);
          detail::spectrum_transform(xt, factors);
        }
        Tensor<T> gk = detail::input_gradient(f, xt, labels, form, clean_logits);
        if (spectral) detail::spectrum_transform(gk, factors);
        g += gk;
      }
      for (auto& v : g.values()) v /= T(samples);
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T sg = g[i] > T{0} ? T{1} : (g[i] < T{0} ? T{-1} : T{0});
      x[i] = detail::project_ball(T(x[i] + step * sg), x0[i], eps);
    }
  }
  return x;
}

template <typename T>
Tensor<T> fgsm(const LogitsFn<T>& f, const Tensor<T>& x, std::span<const int> labels, double epsilon) {
  Rng unused(0);
  return run_attack(f, x, labels, AttackConfig::make_fgsm(epsilon), unused);
}

template <typename T>
Tensor<T> pgd(const LogitsFn<T>& f, const Tensor<T>& x, std::span<const int> labels,
              const AttackConfig& cfg, Rng& rng) {
  AttackConfig c = cfg;
  c.kind = AttackKind::pgd;
  return run_attack(f, x, labels, c, rng);
}

template <typename T>
Tensor<T> cw_pgd(const LogitsFn<T>& f, const Tensor<T>& x, std::span<const int> labels,
                 const AttackConfig& cfg, Rng& rng) {
  AttackConfig c = cfg;
  c.kind = AttackKind::cw_pgd;
  return run_attack(f, x, labels, c, rng);
}

template <typename T>
Tensor<T> ssa(const LogitsFn<T>& f, const Tensor<T>& x, std::span<const int> labels,
              const AttackConfig& cfg, Rng& rng) {
  AttackConfig c = cfg;
  c.kind = AttackKind::ssa;
  return run_attack(f, x, labels, c, rng);
}

}  // namespace hfdr
