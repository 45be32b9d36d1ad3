#include <gtest/gtest.h>

#include <cmath>

#include "hfdr/hfdr_layer.hpp"
#include "helpers.hpp"

using namespace hfdr;

namespace {

double log_sigmoid(double v) { return -std::log1p(std::exp(-v)); }

/// Two-class softmax of (log sigma(h), log sigma(x - h)) / tau, no noise.
double attention_ref(double x, double h, double tau) {
  const double a = log_sigmoid(h) / tau, b = log_sigmoid(x - h) / tau;
  const double m = std::max(a, b);
  return std::exp(a - m) / (std::exp(a - m) + std::exp(b - m));
}

/// Direct zero-padded 3x3 convolution, bias-free, weights O x I x 3 x 3.
std::vector<double> conv3(const std::vector<double>& x, std::size_t c, std::size_t h, std::size_t w,
                          const Tensor<double>& wt) {
  const std::size_t o = wt.dim(0);
  std::vector<double> out(o * h * w, 0.0);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x_ = 0; x_ < w; ++x_) {
        double acc = 0;
        for (std::size_t ic = 0; ic < c; ++ic)
          for (int i = -1; i <= 1; ++i)
            for (int j = -1; j <= 1; ++j) {
              const long yy = long(y) + i, xx = long(x_) + j;
              if (yy < 0 || yy >= long(h) || xx < 0 || xx >= long(w)) continue;
              acc += wt(oc, ic, std::size_t(i + 1), std::size_t(j + 1)) * x[(ic * h + std::size_t(yy)) * w + std::size_t(xx)];
            }
        out[(oc * h + y) * w + x_] = acc;
      }
  return out;
}

HfdrParams<double> random_params(std::size_t c, Rng& rng) {
  HfdrParams<double> p = HfdrParams<double>::init(c, rng);
  p.recal.weights[2] = Var<double>(normal_tensor<double>({c, c, 3, 3}, 0, 0.3, rng), true);
  return p;
}

}  // namespace

TEST(FrequencyAttention, EqualLogitsGiveOneHalf) {
  Rng rng(1);
  const auto xv = normal_tensor<double>({2, 3, 4, 4}, 0, 2, rng);
  Tensor<double> half = xv;
  for (auto& v : half.values()) v /= 2;
  auto [a_hf, a_lf] = frequency_attention(Var<double>(xv), Var<double>(half), 1.0, false, nullptr);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    EXPECT_NEAR(a_hf.value()[i], 0.5, 1e-12);
    EXPECT_NEAR(a_lf.value()[i], 0.5, 1e-12);
  }
}

TEST(FrequencyAttention, SumsToOneAndStaysInRange) {
  Rng rng(2);
  for (bool noise : {false, true}) {
    Var<float> x(normal_tensor<float>({2, 4, 5, 5}, 0, 3, rng));
    Var<float> h(normal_tensor<float>({2, 4, 5, 5}, 0, 3, rng));
    auto [a_hf, a_lf] = frequency_attention(x, h, 0.5f, noise, &rng);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_GE(a_hf.value()[i], 0.0f);
      EXPECT_LE(a_hf.value()[i], 1.0f);
      EXPECT_LT(std::abs(a_hf.value()[i] + a_lf.value()[i] - 1.0f), 1e-6f);
    }
  }
}

TEST(FrequencyAttention, LowTemperatureSaturates) {
  // sigma(x_hf) = 0.9 and sigma(x_lf) = 0.1: x_hf = ln 9, x_lf = -ln 9, x = 0.
  const double l9 = std::log(9.0);
  Var<double> x(Tensor<double>({1, 1, 1, 1}, 0.0));
  Var<double> h(Tensor<double>({1, 1, 1, 1}, l9));
  auto [a_hf, a_lf] = frequency_attention(x, h, 0.01, false, nullptr);
  EXPECT_GT(a_hf.item(), 0.999);
}

TEST(FrequencyAttention, MatchesClosedFormWithoutNoise) {
  Rng rng(3);
  const auto xv = normal_tensor<double>({1, 2, 3, 3}, 0, 4, rng);
  const auto hv = normal_tensor<double>({1, 2, 3, 3}, 0, 4, rng);
  for (double tau : {0.1, 1.0, 3.0}) {
    auto [a_hf, a_lf] = frequency_attention(Var<double>(xv), Var<double>(hv), tau, false, nullptr);
    for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_NEAR(a_hf.value()[i], attention_ref(xv[i], hv[i], tau), 1e-12);
  }
}

TEST(FrequencyAttention, TemperatureLimitSharpensMonotonically) {
  Rng rng(4);
  const auto xv = normal_tensor<double>({1, 3, 6, 6}, 0, 2, rng);
  const auto hv = normal_tensor<double>({1, 3, 6, 6}, 0, 2, rng);
  std::vector<double> prev(xv.size(), 0.0);
  for (double tau : {1.0, 0.7, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01}) {
    auto [a_hf, a_lf] = frequency_attention(Var<double>(xv), Var<double>(hv), tau, false, nullptr);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (log_sigmoid(hv[i]) == log_sigmoid(xv[i] - hv[i])) continue;
      const double m = std::max(a_hf.value()[i], a_lf.value()[i]);
      EXPECT_GE(m, prev[i]) << "tau " << tau << " element " << i;
      prev[i] = m;
    }
  }
}

TEST(FrequencyAttention, NoiseMakesBalancedAttentionUniform) {
  // With equal logits and tau = 1, A_HF = sigmoid(g_HF - g_LF), which is
  // uniform on (0,1) for independent standard Gumbel draws.
  Rng rng(5);
  const std::size_t n = 200000;
  Tensor<double> x({1, 1, 1, n}, 1.0), h({1, 1, 1, n}, 0.5);
  auto [a_hf, a_lf] = frequency_attention(Var<double>(x), Var<double>(h), 1.0, true, &rng);
  double mean = 0, below = 0;
  for (double v : a_hf.value().values()) {
    mean += v / double(n);
    below += v < 0.25 ? 1.0 : 0.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.005);
  EXPECT_NEAR(below / double(n), 0.25, 0.005);
  double var = 0;
  for (double v : a_hf.value().values()) var += (v - mean) * (v - mean) / double(n);
  EXPECT_NEAR(var, 1.0 / 12.0, 0.002);
}

TEST(FrequencyAttention, NoiseIsSeedDeterministic) {
  Rng data(6);
  Var<float> x(normal_tensor<float>({1, 2, 4, 4}, 0, 1, data));
  Var<float> h(normal_tensor<float>({1, 2, 4, 4}, 0, 1, data));
  Rng r1(9), r2(9);
  EXPECT_EQ(frequency_attention(x, h, 1.0f, true, &r1).first.value(),
            frequency_attention(x, h, 1.0f, true, &r2).first.value());
}

TEST(FrequencyAttention, Errors) {
  Var<float> x(Tensor<float>({1, 1, 2, 2})), y(Tensor<float>({1, 1, 2, 3}));
  EXPECT_THROW(frequency_attention(x, y, 1.0f, false, nullptr), ArgumentError);
  EXPECT_THROW(frequency_attention(x, x, 0.0f, false, nullptr), ArgumentError);
  EXPECT_THROW(frequency_attention(x, x, -1.0f, false, nullptr), ArgumentError);
  EXPECT_THROW(frequency_attention(x, x, 1.0f, true, nullptr), ArgumentError);
}

TEST(Disentangle, ExtremeAttention) {
  Rng rng(7);
  Var<double> x(normal_tensor<double>({1, 2, 3, 3}, 0, 1, rng));
  auto [hf1, lf1] = disentangle(x, Var<double>(Tensor<double>(x.shape(), 1.0)));
  EXPECT_EQ(hf1.value(), x.value());
  EXPECT_EQ(lf1.value(), Tensor<double>(x.shape()));
  auto [hf0, lf0] = disentangle(x, Var<double>(Tensor<double>(x.shape(), 0.0)));
  EXPECT_EQ(hf0.value(), Tensor<double>(x.shape()));
  EXPECT_EQ(lf0.value(), x.value());
}

TEST(Disentangle, MatchesElementwiseOracleAndPartitions) {
  Rng rng(8);
  const auto x = normal_tensor<float>({1, 2, 3, 3}, 0, 1, rng);
  const auto a = uniform_tensor<float>({1, 2, 3, 3}, 0, 1, rng);
  auto [hf, lf] = disentangle(Var<float>(x), Var<float>(a));
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(hf.value()[i], x[i] * a[i]);
    EXPECT_EQ(lf.value()[i], x[i] * (1.0f - a[i]));
    EXPECT_LT(std::abs(hf.value()[i] + lf.value()[i] - x[i]), 1e-6f);
  }
  EXPECT_THROW(disentangle(Var<float>(x), Var<float>(Tensor<float>({1, 2, 3, 4}))), ArgumentError);
}

TEST(Recalibrate, ZeroWeightsOrZeroAttentionGiveZero) {
  Rng rng(9);
  Var<double> f(normal_tensor<double>({1, 3, 5, 5}, 0, 1, rng));
  RecalNetParams<double> zero;
  for (auto& w : zero.weights) w = Var<double>(Tensor<double>({3, 3, 3, 3}));
  Var<double> a(uniform_tensor<double>({1, 3, 5, 5}, 0, 1, rng));
  EXPECT_EQ(recalibrate(f, a, zero).value(), Tensor<double>(f.shape()));
  RecalNetParams<double> rnd;
  for (auto& w : rnd.weights) w = Var<double>(normal_tensor<double>({3, 3, 3, 3}, 0, 1, rng));
  const auto out = recalibrate(f, Var<double>(Tensor<double>(f.shape())), rnd).value();
  for (auto v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Recalibrate, MatchesDirectConvolutionOracle) {
  Rng rng(10);
  for (std::size_t c : {1u, 2u}) {
    const auto f = normal_tensor<double>({1, c, 5, 5}, 0, 1, rng);
    const auto a = uniform_tensor<double>({1, c, 5, 5}, 0, 1, rng);
    RecalNetParams<double> p;
    for (auto& w : p.weights) w = Var<double>(normal_tensor<double>({c, c, 3, 3}, 0, 0.5, rng));
    const auto out = recalibrate(Var<double>(f), Var<double>(a), p).value();
    auto h = conv3(f.storage(), c, 5, 5, p.weights[0].value());
    for (auto& v : h) v = std::max(v, 0.0);
    h = conv3(h, c, 5, 5, p.weights[1].value());
    for (auto& v : h) v = std::max(v, 0.0);
    h = conv3(h, c, 5, 5, p.weights[2].value());
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(out[i], h[i] * a[i], 1e-12);
  }
}

TEST(Recalibrate, ChannelMismatchIsConfigError) {
  Var<float> f(Tensor<float>({1, 2, 4, 4}));
  RecalNetParams<float> p;
  for (auto& w : p.weights) w = Var<float>(Tensor<float>({3, 3, 3, 3}));
  EXPECT_THROW(recalibrate(f, f, p), ConfigError);
}

TEST(HfdrForward, ZeroRecalibrationPassesLowFrequencyBranch) {
  Rng rng(11);
  auto p = HfdrParams<double>::init(3, rng);  // last recalibration layer starts at zero
  Var<double> x(normal_tensor<double>({2, 3, 6, 6}, 0, 1, rng));
  const auto out = hfdr_forward(x, p, nullptr);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_NEAR(out.fused.value()[i], x.value()[i] * (1 - out.attention_hf.value()[i]), 1e-15);
}

TEST(HfdrForward, PreservesShape) {
  Rng rng(12);
  auto p = random_params(16, rng);
  Var<float> x(normal_tensor<float>({4, 16, 32, 32}, 0, 1, rng));
  HfdrParams<float> pf;
  pf.align = Var<float>(p.align.value().cast<float>());
  for (std::size_t i = 0; i < 3; ++i) pf.recal.weights[i] = Var<float>(p.recal.weights[i].value().cast<float>());
  const auto out = hfdr_forward(x, pf, nullptr);
  EXPECT_EQ(out.fused.shape(), (Shape{4, 16, 32, 32}));
  EXPECT_EQ(out.attention_hf.shape(), (Shape{4, 16, 32, 32}));
}

TEST(HfdrForward, SeededNoiseIsBitwiseReproducible) {
  Rng rng(13);
  auto p = random_params(2, rng);
  p.noise_enabled = true;
  Var<double> x(normal_tensor<double>({1, 2, 6, 6}, 0, 1, rng));
  Rng a(77), b(77);
  EXPECT_EQ(hfdr_forward(x, p, &a).fused.value(), hfdr_forward(x, p, &b).fused.value());
}

TEST(HfdrForward, PartitionAndComposition) {
  Rng rng(14);
  auto p = random_params(3, rng);
  Var<double> x(normal_tensor<double>({1, 3, 7, 7}, 0, 1, rng));
  const auto out = hfdr_forward(x, p, nullptr);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LT(std::abs(out.f_hf.value()[i] + out.f_lf.value()[i] - x.value()[i]), 1e-12);
    EXPECT_NEAR(out.fused.value()[i], out.f_hf_recal.value()[i] + out.f_lf.value()[i], 1e-15);
  }
  const auto x_hf = apply_srm(x, srm_kernels<double>(), p.align).value();
  EXPECT_EQ(out.x_hf.value(), x_hf);
}

TEST(HfdrForward, ForcedAttentionOverridesGate) {
  Rng rng(15);
  auto p = random_params(2, rng);
  p.forced_attention = 0.0;
  Var<double> x(normal_tensor<double>({1, 2, 5, 5}, 0, 1, rng));
  EXPECT_EQ(hfdr_forward(x, p, nullptr).fused.value(), x.value());
}

TEST(HfdrParams, ValidationAndCount) {
  Rng rng(16);
  auto p = HfdrParams<float>::init(4, rng);
  EXPECT_NO_THROW(p.validate(4));
  EXPECT_THROW(p.validate(5), ConfigError);
  p.tau = 0;
  EXPECT_THROW(p.validate(4), ArgumentError);
  EXPECT_EQ(HfdrParams<float>::parameter_count(16), 3u * 16 * 16 + 27u * 16 * 16);
  for (auto v : p.recal.weights[2].value().values()) EXPECT_EQ(v, 0.0f);
}
