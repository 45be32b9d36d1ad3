#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "hfdr/analysis.hpp"
#include "hfdr/attacks.hpp"
#include "hfdr/freq_filters.hpp"
#include "hfdr/hfdr_layer.hpp"
#include "hfdr/losses.hpp"
#include "hfdr/train.hpp"

namespace hfdr {

struct SelfTestResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline SelfTestResult check(std::string name, bool ok, double measured, double bound) {
  return {std::move(name), ok, "measured " + fmt_num(measured) + ", bound " + fmt_num(bound)};
}

}  // namespace detail

/// Fast invariant checks on random inputs; every entry should pass on a
/// correct build.
inline std::vector<SelfTestResult> run_selftest(std::uint64_t seed = 0) {
  using T = float;
  std::vector<SelfTestResult> out;
  Rng rng(seed);

  {
    auto x = Var<T>(normal_tensor<T>({2, 4, 8, 8}, 0, 1, rng));
    auto xh = Var<T>(normal_tensor<T>({2, 4, 8, 8}, 0, 1, rng));
    auto [a_hf, a_lf] = frequency_attention(x, xh, T{1}, true, &rng);
    double err = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      err = std::max(err, std::abs(double(a_hf.value()[i]) + double(a_lf.value()[i]) - 1.0));
    out.push_back(detail::check("attention sums to one", err < 1e-6, err, 1e-6));
    auto [f_hf, f_lf] = disentangle(x, a_hf);
    double perr = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      perr = std::max(perr, std::abs(double(f_hf.value()[i]) + double(f_lf.value()[i]) - double(x.value()[i])));
    out.push_back(detail::check("disentangle partitions the input", perr < 1e-6, perr, 1e-6));
  }
  {
    bool ok = true;
    const auto& bank = srm_kernels<T>();
    for (const auto& t : bank.taps) {
      T s{0};
      for (auto v : t.values()) s += v;
      ok = ok && s == T{0};
    }
    out.push_back({"residual kernels sum to zero", ok, ok ? "exact" : "nonzero tap sum"});
  }
  {
    const auto m = lowfreq_ratio_mask(8, 8, 0.3);
    SpectralMask comp(8, 8);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) comp.set(i, j, !m(i, j));
    bool ok = true;
    for (std::size_t i = 0; i < 64; ++i) ok = ok && (m.cells()[i] ^ comp.cells()[i]) == 1;
    const auto inside = dft_square_mask(8, 8, 4, SquareMode::keep_inside);
    const auto outside = dft_square_mask(8, 8, 4, SquareMode::keep_outside);
    for (std::size_t i = 0; i < 64; ++i) ok = ok && (inside.cells()[i] ^ outside.cells()[i]) == 1;
    out.push_back({"square masks are complementary", ok, ok ? "exact" : "overlap or gap"});
  }
  {
    std::vector<fft::Complex> g(16 * 12), orig;
    std::normal_distribution<double> nd(0, 1);
    for (auto& v : g) v = {nd(rng), 0.0};
    orig = g;
    fft::dft2(g, 16, 12, false);
    fft::dft2(g, 16, 12, true);
    double err = 0;
    for (std::size_t i = 0; i < g.size(); ++i) err = std::max(err, std::abs(g[i] - orig[i]));
    out.push_back(detail::check("DFT round trip", err < 1e-5, err, 1e-5));
  }
  {
    const double beta = 0.1, c = beta / (1 + beta);
    auto a = Var<double>(Tensor<double>({1, 2, 4, 4}, c));
    const double zero = far_loss(a, beta, 1.0, NormKind::l2).item();
    out.push_back(detail::check("attention regularizer vanishes at the target ratio", std::abs(zero) < 1e-7,
                                std::abs(zero), 1e-7));
    auto h = Var<double>(Tensor<double>({1, 2, 4, 4}, 0.5));
    const double v = far_loss(h, beta, 1.0, NormKind::l2).item();
    out.push_back(detail::check("attention regularizer at constant 0.5", std::abs(v - 0.9) < 1e-6,
                                std::abs(v - 0.9), 1e-6));
  }
  {
    Rng mrng(seed + 1);
    ModelSpec spec;
    spec.num_classes = 3;
    spec.input_shape = {3, 8, 8};
    spec.width = 4;
    Model<T> model = build_model<T>(spec, seed);
    FrozenParams<T> frozen(model);
    LogitsFn<T> f = [&](const Var<T>& v) { return model.logits(v, Mode::eval); };
    std::size_t violations = 0;
    for (int run = 0; run < 40; ++run) {
      const Tensor<T> x = uniform_tensor<T>({2, 3, 8, 8}, 0, 1, mrng);
      const std::vector<int> y{int(mrng() % 3), int(mrng() % 3)};
      const double eps = double(mrng() % 17) / 255.0;
      const Tensor<T> xa = run_attack(f, x, y, AttackConfig::make_pgd(eps, 3), mrng);
      for (std::size_t i = 0; i < x.size(); ++i)
        if (xa[i] < T{0} || xa[i] > T{1} || std::abs(xa[i] - x[i]) > T(eps)) ++violations;
    }
    out.push_back(detail::check("attacks stay in the epsilon ball", violations == 0, double(violations), 0));
    const Tensor<T> x = uniform_tensor<T>({2, 3, 8, 8}, 0, 1, mrng);
    const std::vector<int> y{0, 2};
    Rng r1(3), r2(3);
    const Tensor<T> a1 = run_attack(f, x, y, AttackConfig::make_fgsm(8 / 255.0), r1);
    const Tensor<T> a2 = run_attack(f, x, y, AttackConfig::make_pgd(8 / 255.0, 1, 8 / 255.0, false), r2);
    out.push_back({"fgsm equals one-step pgd", a1 == a2, a1 == a2 ? "bitwise" : "differs"});
    const Tensor<T> a0 = run_attack(f, x, y, AttackConfig::make_pgd(0.0, 5), r1);
    out.push_back({"zero epsilon is the identity", a0 == x, a0 == x ? "bitwise" : "differs"});
  }
  {
    ModelSpec spec;
    spec.input_shape = {3, 8, 8};
    spec.width = 4;
    spec.hfdr_enabled = true;
    Model<T> model = build_model<T>(spec, seed);
    SgdState<T> opt;
    const auto path = std::filesystem::temp_directory_path() / ("hfdr-selftest-" + std::to_string(seed) + ".ckpt");
    save_checkpoint(path, make_checkpoint(model, opt, TrainConfig{}, 0, {}));
    const auto loaded = load_checkpoint<T>(path);
    std::filesystem::remove(path);
    const bool ok = loaded.params == model.state();
    out.push_back({"checkpoint round trip", ok, ok ? "bitwise" : "tensors differ"});
  }
  return out;
}

}  // namespace hfdr
