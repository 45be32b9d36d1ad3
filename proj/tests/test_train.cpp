#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"

using namespace hfdr;
using testing_util::TempDir;
using testing_util::tiny_spec;

namespace {

TrainConfig clean_config(int epochs = 1) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  cfg.lr_milestones = {};
  cfg.augment = false;
  cfg.attack.epsilon = 0.0;
  return cfg;
}

bool same_double(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

void expect_same_stats(const EpochStats& a, const EpochStats& b) {
  EXPECT_EQ(a.epoch, b.epoch);
  EXPECT_TRUE(same_double(a.lr, b.lr));
  EXPECT_TRUE(same_double(a.loss_total, b.loss_total)) << a.loss_total << " vs " << b.loss_total;
  EXPECT_TRUE(same_double(a.loss_at, b.loss_at));
  EXPECT_TRUE(same_double(a.loss_far, b.loss_far));
  EXPECT_TRUE(same_double(a.train_acc, b.train_acc));
  EXPECT_EQ(a.examples, b.examples);
}

const Dataset<float>& toy_data() {
  static const Dataset<float> d = synth_freq_dataset<float>(24, 8, 3);
  return d;
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  if (pos == std::string::npos) throw std::runtime_error("pattern not found: " + from);
  return s.replace(pos, from.size(), to);
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule and configuration

TEST(LrSchedule, StepDecayAtMilestones) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.lr_milestones = {90, 95};
  cfg.lr_gamma = 0.1;
  EXPECT_DOUBLE_EQ(lr_at(cfg, 0), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(cfg, 89), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(cfg, 90), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(lr_at(cfg, 92), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(lr_at(cfg, 97), 0.1 * 0.1 * 0.1);
  EXPECT_THROW(lr_at(cfg, -1), ArgumentError);
}

TEST(TrainConfig, Validation) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.lr = 0; });
  bad([](TrainConfig& c) { c.momentum = 1.0; });
  bad([](TrainConfig& c) { c.weight_decay = -1; });
  bad([](TrainConfig& c) { c.lr_milestones = {10, 5}; });
  bad([](TrainConfig& c) { c.lr_gamma = 0; });
  bad([](TrainConfig& c) { c.awp_gamma = -0.1; });
  bad([](TrainConfig& c) { c.attack.steps = 0; });
  bad([](TrainConfig& c) { c.loss.p_far = 0.5; });
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(Sgd, ZeroGradientStepShrinksWeightsExactly) {
  auto m = build_model<float>(tiny_spec(), 1);
  const auto before = m.state();
  m.zero_grad();
  SgdState<float> opt;
  sgd_step(m, opt, 0.1, 0.9, 5e-4);
  const float shrink = float(1.0 - 0.1 * 5e-4);
  for (auto& p : m.parameters()) {
    const auto& w0 = before.at(p.name);
    for (std::size_t i = 0; i < w0.size(); ++i) ASSERT_EQ(p.var->value()[i], w0[i] * shrink) << p.name;
  }
}

TEST(Sgd, MomentumMatchesReferenceRecursion) {
  const double lr = 0.1, mom = 0.9, wd = 0.01;
  auto m = build_model<double>(tiny_spec(), 2);
  const auto data = synth_freq_dataset<double>(4, 8, 1);
  std::map<std::string, Tensor<double>> w, buf;
  for (auto& p : m.parameters()) w[p.name] = p.var->value();
  SgdState<double> opt;
  for (int step = 0; step < 3; ++step) {
    m.zero_grad();
    backward(ce_loss(m.logits(Var<double>(data.images), Mode::eval), data.labels));
    for (auto& p : m.parameters()) {
      auto& b = buf.try_emplace(p.name, p.var->value().shape()).first->second;
      auto& wr = w[p.name];
      const auto g = p.var->grad();
      for (std::size_t i = 0; i < wr.size(); ++i) {
        b[i] = mom * b[i] + g[i] + wd * wr[i];
        wr[i] -= lr * b[i];
      }
    }
    sgd_step(m, opt, lr, mom, wd);
    for (auto& p : m.parameters())
      for (std::size_t i = 0; i < p.var->size(); ++i)
        ASSERT_NEAR(p.var->value()[i], w[p.name][i], 1e-12) << p.name << " step " << step;
  }
}

// ---------------------------------------------------------------------------
// Adversarial weight perturbation

TEST(Awp, DirectionScalesWithGammaAndWeightNorm) {
  Rng rng(3);
  const auto w = normal_tensor<double>({4, 3, 3, 3}, 0, 1, rng);
  const auto g = normal_tensor<double>({4, 3, 3, 3}, 0, 1, rng);
  for (double gamma : {0.0, 0.005, 0.5}) EXPECT_NEAR(l2_norm(awp_direction(w, g, gamma)), gamma * l2_norm(w), 1e-12);
  const auto zero = awp_direction(w, Tensor<double>(w.shape()), 0.1);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(Awp, PerturbsOnlyWeightTensorsWithRequestedNorm) {
  auto m = build_model<float>(tiny_spec(8, 4, true), 4);
  Rng rng(1);
  const auto& d = toy_data();
  const double gamma = 0.01;
  auto wp = awp_perturb<float>(m, d.images, d.labels, gamma, rng);
  std::size_t seen = 0;
  for (auto& p : m.parameters()) {
    const bool weight = p.var->value().rank() >= 2;
    EXPECT_EQ(wp.deltas.count(p.name), weight ? 1u : 0u) << p.name;
    if (!weight) continue;
    ++seen;
    const double wn = l2_norm(p.var->value());
    if (l2_norm(wp.deltas.at(p.name)) > 0) {
      EXPECT_NEAR(wp.norm(p.name), gamma * wn, 1e-5 * wn) << p.name;
    }
  }
  EXPECT_GT(seen, 0u);
}

TEST(Awp, ZeroGammaGivesZeroPerturbation) {
  auto m = build_model<float>(tiny_spec(), 5);
  Rng rng(1);
  auto wp = awp_perturb<float>(m, toy_data().images, toy_data().labels, 0.0, rng);
  for (const auto& [name, delta] : wp.deltas)
    for (float v : delta.values()) ASSERT_EQ(v, 0.0f) << name;
}

TEST(Awp, ZeroGradientGivesZeroPerturbation) {
  auto m = build_model<float>(tiny_spec(), 5);
  const auto& d = toy_data();
  auto wp = awp_perturb<float>(
      m, [&] { return mul_scalar(sum(m.logits(Var<float>(d.images), Mode::eval)), 0.0f); }, 0.1);
  for (const auto& [name, delta] : wp.deltas)
    for (float v : delta.values()) ASSERT_EQ(v, 0.0f) << name;
}

TEST(Awp, ApplyRevertIsBitwiseAndBuffersAreRestored) {
  auto m = build_model<float>(tiny_spec(8, 4, true), 6);
  const auto before = m.state();
  Rng rng(2);
  auto wp = awp_perturb<float>(m, toy_data().images, toy_data().labels, 0.05, rng);
  EXPECT_EQ(m.state(), before);
  wp.apply(m);
  EXPECT_NE(m.state(), before);
  EXPECT_THROW(wp.apply(m), ArgumentError);
  wp.revert(m);
  EXPECT_EQ(m.state(), before);
}

TEST(Awp, NegativeGammaIsRejected) {
  auto m = build_model<float>(tiny_spec(), 7);
  Rng rng(1);
  EXPECT_THROW(awp_perturb<float>(m, toy_data().images, toy_data().labels, -0.1, rng), ArgumentError);
}

TEST(Awp, ZeroGammaEpochEqualsPlainEpoch) {
  auto cfg = clean_config();
  auto a = build_model<float>(tiny_spec(), 8);
  auto b = build_model<float>(tiny_spec(), 8);
  SgdState<float> oa, ob;
  Rng ra(4), rb(4);
  const auto sa = train_epoch(a, toy_data(), cfg, 0, oa, ra);
  cfg.awp_enabled = true;
  cfg.awp_gamma = 0.0;
  const auto sb = train_epoch(b, toy_data(), cfg, 0, ob, rb);
  expect_same_stats(sa, sb);
  EXPECT_EQ(a.state(), b.state());
}

// ---------------------------------------------------------------------------
// Training loop

TEST(TrainEpoch, CleanTrainingReducesLoss) {
  auto m = build_model<float>(tiny_spec(), 9);
  SgdState<float> opt;
  Rng rng(9);
  const auto hist = fit(m, toy_data(), clean_config(3), opt, rng);
  ASSERT_EQ(hist.size(), 3u);
  EXPECT_LT(hist.back().loss_total, hist.front().loss_total);
  for (const auto& s : hist) EXPECT_TRUE(std::isnan(s.loss_far));
}

TEST(TrainEpoch, SeededRunsAreIdentical) {
  auto cfg = clean_config(2);
  cfg.attack = AttackConfig::make_pgd(4 / 255.0, 2);
  cfg.augment = true;
  std::vector<EpochStats> h[2];
  std::map<std::string, Tensor<float>> st[2];
  for (int r = 0; r < 2; ++r) {
    auto m = build_model<float>(tiny_spec(8, 4, true), 10);
    SgdState<float> opt;
    Rng rng(10);
    h[r] = fit(m, toy_data(), cfg, opt, rng);
    st[r] = m.state();
  }
  for (std::size_t e = 0; e < h[0].size(); ++e) expect_same_stats(h[0][e], h[1][e]);
  EXPECT_EQ(st[0], st[1]);
}

TEST(TrainEpoch, FarTermReportedOnlyWithHfdrBlock) {
  auto cfg = clean_config();
  cfg.attack = AttackConfig::make_pgd(4 / 255.0, 1);
  for (bool h : {false, true}) {
    auto m = build_model<float>(tiny_spec(8, 4, h), 11);
    SgdState<float> opt;
    Rng rng(1);
    const auto s = train_epoch(m, toy_data(), cfg, 0, opt, rng);
    EXPECT_EQ(std::isfinite(s.loss_far), h);
    EXPECT_TRUE(std::isfinite(s.loss_total));
    if (h) {
      EXPECT_NEAR(s.loss_total, s.loss_at + cfg.loss.lambda_far * s.loss_far, 1e-4);
    }
  }
}

TEST(OuterLoss, TradesReducesToCrossEntropyWithoutPerturbation) {
  auto m = build_model<float>(tiny_spec(), 12);
  const auto& d = toy_data();
  Rng rng(1);
  LossConfig lc;
  lc.at_kind = AtKind::trades;
  const float trades = outer_loss(m, d.images, d.images, d.labels, lc, rng).at.item();
  lc.at_kind = AtKind::pgd_at;
  const float ce = outer_loss(m, d.images, d.images, d.labels, lc, rng).at.item();
  EXPECT_NEAR(trades, ce, 1e-6);
}

TEST(TrainEpoch, NonFiniteLossRaisesWithBatchIndex) {
  auto m = build_model<float>(tiny_spec(), 13);
  for (auto& p : m.parameters())
    if (p.name == "fc.weight") p.var->mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
  SgdState<float> opt;
  Rng rng(1);
  try {
    train_epoch(m, toy_data(), clean_config(), 0, opt, rng);
    FAIL() << "expected TrainError";
  } catch (const TrainError& e) {
    EXPECT_EQ(e.batch_index, 0u);
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }
}

TEST(TrainEpoch, RejectsMismatchedDataset) {
  auto m = build_model<float>(tiny_spec(16), 1);
  SgdState<float> opt;
  Rng rng(1);
  EXPECT_THROW(train_epoch(m, toy_data(), clean_config(), 0, opt, rng), ArgumentError);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

struct SavedRun {
  TempDir dir{"ckpt"};
  std::filesystem::path path = dir / "model.ckpt";
  Model<float> model;
  SgdState<float> opt;
  TrainConfig cfg = clean_config(1);
  std::vector<EpochStats> hist;

  explicit SavedRun(bool hfdr_on = true) {
    model = build_model<float>(tiny_spec(8, 4, hfdr_on), 14);
    Rng rng(1);
    hist = fit(model, toy_data(), cfg, opt, rng);
    save_checkpoint(path, make_checkpoint(model, opt, cfg, 1, hist));
  }
};

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  SavedRun run;
  const auto c = load_checkpoint<float>(run.path, config_digest(run.cfg));
  EXPECT_FALSE(c.digest_mismatch);
  EXPECT_EQ(c.format_version, 1);
  EXPECT_EQ(c.epoch, 1);
  EXPECT_EQ(c.spec, run.model.spec());
  EXPECT_EQ(c.params, run.model.state());
  EXPECT_EQ(c.optimizer, run.opt.momentum);
  ASSERT_EQ(c.history.size(), run.hist.size());
  expect_same_stats(c.history[0], run.hist[0]);
  EXPECT_EQ(c.history[0].seconds, run.hist[0].seconds);
  auto restored = model_from_checkpoint(c);
  const auto x = Var<float>(toy_data().images);
  EXPECT_EQ(restored.logits(x, Mode::eval).value(), run.model.logits(x, Mode::eval).value());
}

TEST(Checkpoint, NewerFormatVersionIsRefused) {
  SavedRun run(false);
  const std::string text = testing_util::slurp(run.path);
  write_text(run.path, replace_once(text, "\"format_version\": 1", "\"format_version\": 2"));
  EXPECT_THROW(load_checkpoint<float>(run.path), CheckpointError);
}

TEST(Checkpoint, MismatchedModelNamesTensor) {
  SavedRun run(false);
  const auto c = load_checkpoint<float>(run.path);
  auto other = build_model<float>(tiny_spec(8, 6), 0);
  try {
    other.load_state(c.params);
    FAIL() << "expected ArgumentError";
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("tensor '"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, DigestMismatchIsFlagged) {
  SavedRun run(false);
  EXPECT_TRUE(load_checkpoint<float>(run.path, "0000").digest_mismatch);
  EXPECT_FALSE(load_checkpoint<float>(run.path).digest_mismatch);
}

TEST(Checkpoint, MalformedFilesRaiseFormatError) {
  SavedRun run(false);
  EXPECT_THROW(load_checkpoint<double>(run.path), FormatError);
  const std::string text = testing_util::slurp(run.path);
  write_text(run.path, text.substr(0, text.size() / 2));
  EXPECT_THROW(load_checkpoint<float>(run.path), FormatError);
  write_text(run.path, "NOTACKPT 12\n{}");
  EXPECT_THROW(load_checkpoint<float>(run.path), FormatError);
  write_text(run.path, "");
  EXPECT_THROW(load_checkpoint<float>(run.path), FormatError);
}

TEST(Checkpoint, MissingFileRaisesIoError) {
  TempDir dir("missing");
  EXPECT_THROW(load_checkpoint<float>(dir / "nope.ckpt"), IoError);
}
