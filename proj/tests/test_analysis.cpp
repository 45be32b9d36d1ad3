#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "helpers.hpp"

using namespace hfdr;
using testing_util::TempDir;

namespace {

const Dataset<float>& toy_data() {
  static const Dataset<float> d = synth_freq_dataset<float>(48, 8, 21);
  return d;
}

Model<float>& toy_model(int which = 0) {
  static Model<float> a = testing_util::trained_toy<float>(toy_data(), 1);
  static Model<float> b = testing_util::trained_toy<float>(toy_data(), 2);
  return which == 0 ? a : b;
}

EvalOptions small_batches() {
  EvalOptions o;
  o.batch_size = 32;
  o.seed = 5;
  return o;
}

SweepOptions sweep_options(int steps = 3) {
  SweepOptions o;
  o.attack = AttackConfig::make_pgd(8 / 255.0, steps);
  o.batch_size = 32;
  o.seed = 5;
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, EmptyAttackListGivesCleanRowOnly) {
  const auto rep = evaluate_robustness(toy_model(), toy_data(), {}, small_batches());
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(rep.rows[0].attack, "clean");
  EXPECT_EQ(rep.rows[0].total, toy_data().size());
  EXPECT_GT(rep.clean_accuracy(), 0.9);
}

TEST(Evaluate, ZeroEpsilonAttackMatchesClean) {
  const auto rep = evaluate_robustness(toy_model(), toy_data(), {AttackConfig::make_pgd(0.0, 10)}, small_batches());
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[1].correct, rep.rows[0].correct);
}

TEST(Evaluate, DeterministicAcrossCalls) {
  const std::vector<AttackConfig> attacks{AttackConfig::make_pgd(8 / 255.0, 3), AttackConfig::make_fgsm(8 / 255.0),
                                          AttackConfig::make_ssa(8 / 255.0, 2, 0.5, 2)};
  const auto a = evaluate_robustness(toy_model(), toy_data(), attacks, small_batches());
  const auto b = evaluate_robustness(toy_model(), toy_data(), attacks, small_batches());
  EXPECT_EQ(a.rows, b.rows);
  EXPECT_EQ(a.model_digest, b.model_digest);
  EXPECT_EQ(a.row("fgsm", 8 / 255.0).steps, 1);
  EXPECT_THROW(a.row("cw-30", 8 / 255.0), ArgumentError);
}

TEST(Evaluate, AttackFailuresCarryAttackName) {
  auto m = toy_model().clone();
  for (auto& p : m.parameters())
    if (p.name == "stage1.0.weight") p.var->mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    evaluate_robustness(m, toy_data(), {AttackConfig::make_pgd(8 / 255.0, 2)}, small_batches());
    FAIL() << "expected AttackError";
  } catch (const AttackError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("pgd-2: ", 0), 0u) << e.what();
  }
}

TEST(Evaluate, InvalidAttackIsRejectedUpFront) {
  EXPECT_THROW(evaluate_robustness(toy_model(), toy_data(), {AttackConfig::make_pgd(8 / 255.0, 0)}), ConfigError);
}

// ---------------------------------------------------------------------------
// Frequency sweep

TEST(Sweep, FullRatioMatchesEvaluation) {
  const std::vector<double> eps{0.0, 8 / 255.0};
  const auto sw = frequency_sweep(toy_model(), toy_data(), StageId::conv2, {0.5, 1.0}, eps, sweep_options());
  const auto ev = evaluate_robustness(toy_model(), toy_data(), {sweep_options().attack}, small_batches());
  EXPECT_NEAR(sw.accuracy[0][1], ev.clean_accuracy(), 1e-4);
  EXPECT_NEAR(sw.accuracy[1][1], ev.rows[1].accuracy, 1e-4);
}

TEST(Sweep, GrowthCountsTelescope) {
  const std::vector<double> ratios{0.1, 0.3, 0.6, 1.0};
  const auto sw = frequency_sweep(toy_model(), toy_data(), StageId::conv1, ratios, {0.0, 4 / 255.0}, sweep_options(2));
  for (std::size_t e = 0; e < sw.epsilons.size(); ++e) {
    long total = 0;
    for (std::size_t k = 0; k < ratios.size(); ++k) total += sw.growth_count(e, k);
    EXPECT_EQ(total, long(sw.correct[e].back()) - long(sw.correct[e].front()));
    EXPECT_EQ(sw.growth(e, 0), 0.0);
  }
}

TEST(Sweep, RejectsBadRatios) {
  auto& m = toy_model();
  EXPECT_THROW(frequency_sweep(m, toy_data(), StageId::conv1, {}, {0.0}), ArgumentError);
  EXPECT_THROW(frequency_sweep(m, toy_data(), StageId::conv1, {0.0, 0.5}, {0.0}), ArgumentError);
  EXPECT_THROW(frequency_sweep(m, toy_data(), StageId::conv1, {0.5, 1.5}, {0.0}), ArgumentError);
  EXPECT_THROW(frequency_sweep(m, toy_data(), StageId::conv1, {0.5, 0.2}, {0.0}), ArgumentError);
  EXPECT_THROW(frequency_sweep(m, toy_data(), StageId(7), {0.5}, {0.0}), ConfigError);
}

TEST(Sweep, AdversarialCurveStaysBelowCleanAccuracy) {
  const auto sw = frequency_sweep(toy_model(), toy_data(), StageId::conv1, default_sweep_ratios(),
                                  {8 / 255.0}, sweep_options(5));
  const double clean = evaluate_robustness(toy_model(), toy_data(), {}, small_batches()).clean_accuracy();
  for (std::size_t k = 0; k < sw.ratios.size(); ++k) EXPECT_LE(sw.accuracy[0][k], clean + 0.02) << sw.ratios[k];
}

TEST(SquareSweep, FullWidthKeepsEverything) {
  const std::vector<std::size_t> widths{2, 4, 8};
  const auto sq = square_sweep(toy_model(), toy_data(), StageId::conv1, widths, {0.0}, sweep_options());
  const auto ev = evaluate_robustness(toy_model(), toy_data(), {}, small_batches());
  EXPECT_NEAR(sq.accuracy(0, 2, SquareMode::keep_inside), ev.clean_accuracy(), 1e-4);
  for (std::size_t k = 0; k < widths.size(); ++k)
    for (auto mode : {SquareMode::keep_inside, SquareMode::keep_outside}) {
      EXPECT_GE(sq.accuracy(0, k, mode), 0.0);
      EXPECT_LE(sq.accuracy(0, k, mode), 1.0);
    }
  EXPECT_THROW(square_sweep(toy_model(), toy_data(), StageId::conv1, {}, {0.0}), ArgumentError);
}

// ---------------------------------------------------------------------------
// Transfer

TEST(Transfer, DiagonalMatchesWhiteBoxEvaluation) {
  const auto atk = AttackConfig::make_pgd(8 / 255.0, 3);
  const auto tab = transfer_matrix<float>({{"a", &toy_model(0)}, {"b", &toy_model(1)}},
                                          {{"a", &toy_model(0)}, {"b", &toy_model(1)}}, {atk}, toy_data(),
                                          small_batches());
  for (int i = 0; i < 2; ++i) {
    const auto ev = evaluate_robustness(toy_model(i), toy_data(), {atk}, small_batches());
    EXPECT_NEAR(tab.accuracy[0][i][i], ev.rows[1].accuracy, 1e-12);
  }
  for (int s = 0; s < 2; ++s)
    for (int t = 0; t < 2; ++t)
      if (s != t) {
        EXPECT_GE(tab.accuracy[0][s][t], tab.accuracy[0][t][t] - 0.03) << s << "->" << t;
      }
}

TEST(Transfer, ZeroEpsilonGivesCleanAccuracy) {
  const auto tab = transfer_matrix<float>({{"a", &toy_model(0)}, {"b", &toy_model(1)}}, {{"b", &toy_model(1)}},
                                          {AttackConfig::make_pgd(0.0, 3)}, toy_data(), small_batches());
  const double clean = evaluate_robustness(toy_model(1), toy_data(), {}, small_batches()).clean_accuracy();
  for (int s = 0; s < 2; ++s) EXPECT_EQ(tab.accuracy[0][std::size_t(s)][0], clean);
}

TEST(Transfer, IncompatibleInputShapeIsConfigError) {
  auto big = build_model<float>(testing_util::tiny_spec(16), 0);
  EXPECT_THROW(transfer_matrix<float>({{"big", &big}}, {{"a", &toy_model()}}, {AttackConfig::make_pgd(0.0, 1)},
                                      toy_data()),
               ConfigError);
}

// ---------------------------------------------------------------------------
// CSV and plots

TEST(Csv, EvalRoundTrip) {
  TempDir dir("csv");
  const auto rep = evaluate_robustness(toy_model(), toy_data(),
                                       {AttackConfig::make_pgd(8 / 255.0, 2), AttackConfig::make_fgsm(4 / 255.0)},
                                       small_batches());
  emit_csv(rep, dir / "eval.csv");
  EXPECT_EQ(read_eval_csv(dir / "eval.csv").rows, rep.rows);
  EXPECT_EQ(testing_util::slurp(dir / "eval.csv").substr(0, 44), "attack,epsilon,steps,accuracy,correct,total\n");
}

TEST(Csv, SweepRoundTripAndStableBytes) {
  TempDir dir("csv");
  const auto sw = frequency_sweep(toy_model(), toy_data(), StageId::conv2, {0.2, 1.0}, {0.0, 4 / 255.0},
                                  sweep_options(2));
  emit_csv(sw, dir / "a.csv");
  const auto back = read_sweep_csv(dir / "a.csv");
  EXPECT_EQ(back.ratios, sw.ratios);
  EXPECT_EQ(back.epsilons, sw.epsilons);
  EXPECT_EQ(back.correct, sw.correct);
  EXPECT_EQ(back.accuracy, sw.accuracy);
  EXPECT_EQ(back.stage, StageId::conv2);
  const auto again = frequency_sweep(toy_model(), toy_data(), StageId::conv2, {0.2, 1.0}, {0.0, 4 / 255.0},
                                     sweep_options(2));
  emit_csv(again, dir / "b.csv");
  EXPECT_EQ(testing_util::slurp(dir / "a.csv"), testing_util::slurp(dir / "b.csv"));
  const std::string text = testing_util::slurp(dir / "a.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), kSweepCsvHeader);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}

TEST(Csv, EmptyReportsWriteHeaderOnly) {
  TempDir dir("csv");
  emit_csv(SweepReport{}, dir / "s.csv");
  EXPECT_EQ(testing_util::slurp(dir / "s.csv"), std::string(kSweepCsvHeader) + "\n");
  emit_csv(std::vector<EpochStats>{}, dir / "e.csv");
  EXPECT_EQ(testing_util::slurp(dir / "e.csv"), std::string(kEpochCsvHeader) + "\n");
  emit_csv(TransferTable{}, dir / "t.csv");
  EXPECT_EQ(testing_util::slurp(dir / "t.csv"), std::string(kTransferCsvHeader) + "\n");
}

TEST(Csv, SquareSweepRows) {
  TempDir dir("csv");
  const auto sq = square_sweep(toy_model(), toy_data(), StageId::conv1, {2, 4}, {0.0}, sweep_options());
  emit_csv(sq, dir / "sq.csv");
  const std::string text = testing_util::slurp(dir / "sq.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), kSquareSweepCsvHeader);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
  EXPECT_NE(text.find(",keep_outside,4,"), std::string::npos);
}

TEST(Csv, MalformedFilesAreRejected) {
  TempDir dir("csv");
  std::ofstream(dir / "bad.csv") << "wrong,header\n";
  EXPECT_THROW(read_eval_csv(dir / "bad.csv"), FormatError);
  std::ofstream(dir / "short.csv") << kEvalCsvHeader << "\nclean,0,0\n";
  EXPECT_THROW(read_eval_csv(dir / "short.csv"), FormatError);
  EXPECT_THROW(read_eval_csv(dir / "absent.csv"), IoError);
}

TEST(Plot, WritesSvg) {
  TempDir dir("plot");
  const auto sw = frequency_sweep(toy_model(), toy_data(), StageId::conv1, {0.1, 0.5, 1.0}, {0.0, 8 / 255.0},
                                  sweep_options(2));
  emit_plot(sw, dir / "sweep.svg");
  const std::string svg = testing_util::slurp(dir / "sweep.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(FmtNum, ShortestRoundTrip) {
  for (double v : {0.0, 1.0, 0.1, 8 / 255.0, 1e-300, -2.5, 123456789.123}) EXPECT_EQ(parse_num(fmt_num(v)), v);
  EXPECT_TRUE(std::isnan(parse_num(fmt_num(std::nan("")))));
  EXPECT_EQ(fmt_num(0.5), "0.5");
  EXPECT_THROW(parse_num("1.2.3"), FormatError);
  EXPECT_THROW(parse_num(""), FormatError);
}
