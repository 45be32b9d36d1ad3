#pragma once

#include <cstdlib>
#include <iostream>
#include <span>
#include <string>

#include "hfdr/ops.hpp"

namespace hfdr {

enum class AtKind { pgd_at, trades, mart };
enum class FarSource { adversarial, clean, both };

/// Coefficients of the outer objective. The three "beta"s are distinct knobs.
struct LossConfig {
  AtKind at_kind = AtKind::pgd_at;
  double beta_trades = 6.0;
  double beta_mart = 6.0;
  double lambda_far = 0.1;
  double beta_far = 0.1;
  double p_far = 1.0;
  NormKind norm_kind = NormKind::l2;
  FarSource far_source = FarSource::adversarial;

  void validate() const {
    if (beta_trades < 0 || beta_mart < 0 || lambda_far < 0 || beta_far < 0)
      throw ConfigError("loss: coefficients must be non-negative");
    if (p_far < 1) throw ConfigError("loss: p_far must be >= 1");
  }
};

inline bool debug_logging() {
  static const bool on = [] {
    const char* v = std::getenv("HFDR_LOG");
    return v && std::string(v) == "debug";
  }();
  return on;
}

/// Mean cross-entropy over the batch.
template <typename T>
Var<T> ce_loss(const Var<T>& logits, std::span<const int> labels) {
  return mul_scalar(mean(pick(log_softmax(logits), labels)), T{-1});
}

/// Per-example KL(softmax(p_logits) || softmax(q_logits)) -> N.
template <typename T>
Var<T> kl_rows(const Var<T>& p_logits, const Var<T>& q_logits) {
  p_logits.value().check_same(q_logits.value(), "kl_rows");
  Var<T> lp = log_softmax(p_logits);
  Var<T> lq = log_softmax(q_logits);
  return row_sum(mul(exp(lp), sub(lp, lq)));
}

template <typename T>
Var<T> trades_loss(const Var<T>& logits_clean, const Var<T>& logits_adv, std::span<const int> labels,
                   T beta) {
  logits_clean.value().check_same(logits_adv.value(), "trades_loss");
  return add(ce_loss(logits_clean, labels), mul_scalar(mean(kl_rows(logits_clean, logits_adv)), beta));
}

/// Boosted CE on adversarial logits: CE - log(1 - max_{k != y} p_k).
template <typename T>
Var<T> boosted_ce(const Var<T>& logits_adv, std::span<const int> labels) {
  Var<T> p_adv = exp(log_softmax(logits_adv));
  Var<T> margin = log(clamp_min(one_minus(max_excluding(p_adv, labels)), T(1e-12)));
  return sub(ce_loss(logits_adv, labels), mean(margin));
}

template <typename T>
Var<T> mart_loss(const Var<T>& logits_clean, const Var<T>& logits_adv, std::span<const int> labels,
                 T beta) {
  logits_clean.value().check_same(logits_adv.value(), "mart_loss");
  Var<T> p_true_clean = pick(exp(log_softmax(logits_clean)), labels);
  Var<T> weighted = mul(kl_rows(logits_clean, logits_adv), one_minus(p_true_clean));
  return add(boosted_ce(logits_adv, labels), mul_scalar(mean(weighted), beta));
}

/// Mean over (image, channel) of | ||A|| / ||1 - A|| - beta |^p on each H x W
/// attention slice. The denominator is clamped at 1e-8.
template <typename T>
Var<T> far_loss(const Var<T>& a_hf, T beta, T p, NormKind kind) {
  require_rank4(a_hf.value(), "far_loss");
  if (p < T{1}) throw ArgumentError("far_loss: p must be >= 1");
  constexpr T kFloor = T(1e-8);
  Var<T> num = slice_norm(a_hf, kind);
  Var<T> den = slice_norm(one_minus(a_hf), kind);
  if (debug_logging())
    for (auto v : den.value().values())
      if (v < kFloor) {
        std::cerr << "[hfdr debug] far_loss: saturated attention slice, denominator clamped\n";
        break;
      }
  Var<T> ratio = div(num, clamp_min(den, kFloor));
  return mean(pow_scalar(abs(add_scalar(ratio, -beta)), p));
}

template <typename T>
Var<T> total_loss(const Var<T>& at_value, const Var<T>& far_value, T lambda) {
  return add(at_value, mul_scalar(far_value, lambda));
}

inline double total_loss(double at_value, double far_value, double lambda) {
  return at_value + lambda * far_value;
}

}  // namespace hfdr
