#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hfdr/attacks.hpp"
#include "hfdr/data.hpp"
#include "hfdr/freq_filters.hpp"
#include "hfdr/models.hpp"
#include "hfdr/train.hpp"

namespace hfdr {

// ---------------------------------------------------------------------------
// Number formatting: shortest text that parses back to the same double.

inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_num(const std::string& s) {
  if (s == "nan") return std::nan("");
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError("bad number '" + s + "'");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
std::string model_digest(Model<T>& model) {
  std::string bytes;
  for (const auto& [name, t] : model.state()) {
    bytes += name;
    bytes.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
  }
  return fnv1a_hex(bytes);
}

/// Attack randomness is keyed by (seed, batch) only, so every entry point
/// that attacks the same batch with the same config sees the same examples.
inline Rng batch_rng(std::uint64_t seed, std::size_t batch) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(batch), 0x5eedu};
  return Rng(seq);
}

inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(n, b + batch_size); ++i) idx.push_back(i);
    out.push_back(std::move(idx));
  }
  return out;
}

struct EvalOptions {
  std::size_t batch_size = 200;
  std::uint64_t seed = 0;
};

template <typename T>
LogitsFn<T> eval_logits(Model<T>& model, Rng& noise_rng) {
  return [&model, &noise_rng](const Var<T>& v) { return model.logits(v, Mode::eval, &noise_rng); };
}

template <typename T>
Tensor<T> attack_batch(Model<T>& model, const Tensor<T>& x, std::span<const int> y, const AttackConfig& cfg,
                       std::uint64_t seed, std::size_t batch) {
  if (cfg.epsilon == 0.0) return x;
  Rng rng = batch_rng(seed, batch);
  Rng noise = batch_rng(~seed, batch);
  FrozenParams<T> frozen(model);
  try {
    if (cfg.loss_form == LossForm::kl) {
      const Tensor<T> clean = model.logits(Var<T>(x), Mode::eval, &noise).value();
      return run_attack(eval_logits(model, noise), x, y, cfg, rng, &clean);
    }
    return run_attack(eval_logits(model, noise), x, y, cfg, rng);
  } catch (const AttackError& e) {
    throw AttackError(cfg.name() + ": " + e.what(), e.batch_index);
  }
}

template <typename T>
std::size_t correct_on(Model<T>& model, const Tensor<T>& x, std::span<const int> y, std::uint64_t seed,
                       std::size_t batch) {
  NoGradGuard ng;
  Rng noise = batch_rng(~seed, batch);
  return count_correct(model.logits(Var<T>(x), Mode::eval, &noise).value(), y);
}

// ---------------------------------------------------------------------------
// Robustness evaluation

struct EvalRow {
  std::string attack;  // "clean" for the unperturbed row
  double epsilon = 0;
  int steps = 0;
  double accuracy = 0;
  std::size_t correct = 0;
  std::size_t total = 0;

  bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // rows[0] is the clean row
  std::string model_digest;
  std::string dataset;
  double seconds = 0;

  double clean_accuracy() const { return rows.at(0).accuracy; }
  const EvalRow& row(const std::string& attack, double eps) const {
    for (const auto& r : rows)
      if (r.attack == attack && r.epsilon == eps) return r;
    throw ArgumentError("no report row for " + attack + " at eps " + fmt_num(eps));
  }
};

template <typename T>
EvalReport evaluate_robustness(Model<T>& model, const Dataset<T>& ds, const std::vector<AttackConfig>& attacks,
                               const EvalOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& a : attacks) a.validate();
  EvalReport rep;
  rep.model_digest = model_digest(model);
  rep.dataset = ds.name + "/" + ds.split + "/" + std::to_string(ds.size());
  rep.rows.push_back({"clean", 0.0, 0, 0, 0, ds.size()});
  for (const auto& a : attacks) rep.rows.push_back({a.name(), a.epsilon, a.steps, 0, 0, ds.size()});
  const auto batches = batch_indices(ds.size(), opt.batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Tensor<T> x = ds.batch_images(batches[b]);
    const std::vector<int> y = ds.batch_labels(batches[b]);
    rep.rows[0].correct += correct_on(model, x, y, opt.seed, b);
    for (std::size_t a = 0; a < attacks.size(); ++a) {
      const Tensor<T> xa = attack_batch(model, x, y, attacks[a], opt.seed, b);
      rep.rows[a + 1].correct += correct_on(model, xa, y, opt.seed, b);
    }
  }
  for (auto& r : rep.rows) r.accuracy = r.total ? double(r.correct) / double(r.total) : 0.0;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Frequency-component sweep

inline std::vector<double> default_sweep_ratios() {
  return {0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
}
inline std::vector<double> default_sweep_epsilons() {
  return {0.0, 4.0 / 255.0, 8.0 / 255.0, 12.0 / 255.0, 16.0 / 255.0};
}

struct SweepReport {
  StageId stage = StageId::conv1;
  std::vector<double> ratios;
  std::vector<double> epsilons;
  std::vector<std::vector<std::size_t>> correct;  // [eps][ratio]
  std::vector<std::vector<double>> accuracy;      // [eps][ratio]
  std::size_t total = 0;

  /// acc(r_k) - acc(r_{k-1}); zero at k = 0.
  double growth(std::size_t e, std::size_t k) const {
    return k == 0 ? 0.0 : accuracy[e][k] - accuracy[e][k - 1];
  }
  /// Same in correctly classified examples; sums telescope exactly.
  long growth_count(std::size_t e, std::size_t k) const {
    return k == 0 ? 0 : long(correct[e][k]) - long(correct[e][k - 1]);
  }
};

struct SweepOptions {
  AttackConfig attack = AttackConfig::make_pgd(8.0 / 255.0, 10);  // epsilon overridden per row
  std::size_t batch_size = 200;
  std::uint64_t seed = 0;
};

namespace detail {

/// Attacks each batch once per epsilon, then masks the hooked feature map
/// with every mask (same mask for every channel) and resumes the forward
/// pass. Returns correct counts [eps][mask].
template <typename T, typename MakeMasks>
std::vector<std::vector<std::size_t>> masked_feature_counts(Model<T>& model, const Dataset<T>& ds, StageId stage,
                                                            const std::vector<double>& eps_list,
                                                            const SweepOptions& opt, MakeMasks make_masks) {
  if (int(stage) < 0 || int(stage) > 3) throw ConfigError("frequency_sweep: stage is not hookable");
  std::vector<std::vector<std::size_t>> correct(eps_list.size());
  std::vector<SpectralMask> masks;
  const auto batches = batch_indices(ds.size(), opt.batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Tensor<T> x = ds.batch_images(batches[b]);
    const std::vector<int> y = ds.batch_labels(batches[b]);
    for (std::size_t e = 0; e < eps_list.size(); ++e) {
      AttackConfig ac = opt.attack;
      ac.epsilon = eps_list[e];
      const Tensor<T> xa = attack_batch(model, x, y, ac, opt.seed, b);
      NoGradGuard ng;
      Rng noise = batch_rng(~opt.seed, b);
      const Tensor<T> feat = model.hook_feature(Var<T>(xa), stage, Mode::eval, &noise).value();
      if (masks.empty()) masks = make_masks(feat.dim(2), feat.dim(3));
      correct[e].resize(masks.size(), 0);
      for (std::size_t k = 0; k < masks.size(); ++k) {
        const Tensor<T> masked = apply_frequency_mask(feat, masks[k]);
        const Tensor<T> logits = model.resume(Var<T>(masked), stage, Mode::eval, &noise).logits.value();
        correct[e][k] += count_correct(logits, y);
      }
    }
  }
  return correct;
}

}  // namespace detail

template <typename T>
SweepReport frequency_sweep(Model<T>& model, const Dataset<T>& ds, StageId stage, const std::vector<double>& ratios,
                            const std::vector<double>& eps_list, const SweepOptions& opt = {}) {
  if (ratios.empty()) throw ArgumentError("frequency_sweep: no ratios");
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0 && ratios[i] <= 1.0)) throw ArgumentError("frequency_sweep: ratio outside (0,1]");
    if (i > 0 && !(ratios[i] > ratios[i - 1])) throw ArgumentError("frequency_sweep: ratios must increase");
  }
  SweepReport rep;
  rep.stage = stage;
  rep.ratios = ratios;
  rep.epsilons = eps_list;
  rep.total = ds.size();
  rep.correct = detail::masked_feature_counts(model, ds, stage, eps_list, opt, [&](std::size_t h, std::size_t w) {
    std::vector<SpectralMask> masks;
    for (double r : ratios) masks.push_back(lowfreq_ratio_mask(h, w, r));
    return masks;
  });
  rep.accuracy.assign(eps_list.size(), std::vector<double>(ratios.size(), 0.0));
  for (std::size_t e = 0; e < eps_list.size(); ++e)
    for (std::size_t k = 0; k < ratios.size(); ++k)
      rep.accuracy[e][k] = rep.total ? double(rep.correct[e][k]) / double(rep.total) : 0.0;
  return rep;
}

struct SquareSweepReport {
  StageId stage = StageId::conv1;
  std::vector<std::size_t> widths;
  std::vector<double> epsilons;
  std::vector<std::vector<std::size_t>> inside, outside;  // correct counts [eps][width]
  std::size_t total = 0;

  double accuracy(std::size_t e, std::size_t k, SquareMode mode) const {
    const auto& c = mode == SquareMode::keep_inside ? inside : outside;
    return total ? double(c[e][k]) / double(total) : 0.0;
  }
};

/// Same protocol as frequency_sweep with centered B x B square masks, in
/// both keep_inside and keep_outside mode.
template <typename T>
SquareSweepReport square_sweep(Model<T>& model, const Dataset<T>& ds, StageId stage,
                               const std::vector<std::size_t>& widths, const std::vector<double>& eps_list,
                               const SweepOptions& opt = {}) {
  if (widths.empty()) throw ArgumentError("square_sweep: no widths");
  SquareSweepReport rep;
  rep.stage = stage;
  rep.widths = widths;
  rep.epsilons = eps_list;
  rep.total = ds.size();
  const auto counts = detail::masked_feature_counts(model, ds, stage, eps_list, opt, [&](std::size_t h, std::size_t w) {
    std::vector<SpectralMask> masks;
    for (std::size_t b : widths) masks.push_back(dft_square_mask(h, w, b, SquareMode::keep_inside));
    for (std::size_t b : widths) masks.push_back(dft_square_mask(h, w, b, SquareMode::keep_outside));
    return masks;
  });
  for (const auto& row : counts) {
    rep.inside.emplace_back(row.begin(), row.begin() + long(widths.size()));
    rep.outside.emplace_back(row.begin() + long(widths.size()), row.end());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Transfer attacks

struct TransferTable {
  std::vector<std::string> sources, targets, attacks;
  std::vector<std::vector<std::vector<double>>> accuracy;  // [attack][source][target]
};

/// Adversarial sets crafted on each source, scored on each target.
template <typename T>
TransferTable transfer_matrix(const std::vector<std::pair<std::string, Model<T>*>>& sources,
                              const std::vector<std::pair<std::string, Model<T>*>>& targets,
                              const std::vector<AttackConfig>& attacks, const Dataset<T>& ds,
                              const EvalOptions& opt = {}) {
  if (sources.empty() || targets.empty()) throw ArgumentError("transfer_matrix: need at least one source and target");
  const Shape want = ds.image_shape();
  for (const auto* group : {&sources, &targets})
    for (const auto& [name, m] : *group) {
      const auto& s = m->spec().input_shape;
      if (Shape(s.begin(), s.end()) != want)
        throw ConfigError("transfer_matrix: model '" + name + "' expects input " +
                          shape_str(Shape(s.begin(), s.end())) + ", dataset has " + shape_str(want));
    }
  TransferTable tab;
  for (const auto& s : sources) tab.sources.push_back(s.first);
  for (const auto& t : targets) tab.targets.push_back(t.first);
  std::vector<std::vector<std::vector<std::size_t>>> correct(
      attacks.size(), std::vector<std::vector<std::size_t>>(sources.size(), std::vector<std::size_t>(targets.size())));
  for (const auto& a : attacks) tab.attacks.push_back(a.name());
  const auto batches = batch_indices(ds.size(), opt.batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Tensor<T> x = ds.batch_images(batches[b]);
    const std::vector<int> y = ds.batch_labels(batches[b]);
    for (std::size_t a = 0; a < attacks.size(); ++a)
      for (std::size_t s = 0; s < sources.size(); ++s) {
        const Tensor<T> xa = attack_batch(*sources[s].second, x, y, attacks[a], opt.seed, b);
        for (std::size_t t = 0; t < targets.size(); ++t)
          correct[a][s][t] += correct_on(*targets[t].second, xa, y, opt.seed, b);
      }
  }
  tab.accuracy.assign(attacks.size(), std::vector<std::vector<double>>(sources.size(), std::vector<double>(targets.size())));
  for (std::size_t a = 0; a < attacks.size(); ++a)
    for (std::size_t s = 0; s < sources.size(); ++s)
      for (std::size_t t = 0; t < targets.size(); ++t)
        tab.accuracy[a][s][t] = ds.size() ? double(correct[a][s][t]) / double(ds.size()) : 0.0;
  return tab;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kEvalCsvHeader = "attack,epsilon,steps,accuracy,correct,total";
inline constexpr const char* kSweepCsvHeader = "stage,epsilon,ratio,accuracy,growth,correct,total";
inline constexpr const char* kSquareSweepCsvHeader = "stage,epsilon,mode,width,accuracy,correct,total";
inline constexpr const char* kTransferCsvHeader = "attack,source,target,accuracy";
inline constexpr const char* kEpochCsvHeader = "epoch,lr,loss_total,loss_at,loss_far,train_acc,seconds";

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const char* header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw FormatError(path.string() + ": expected header '" + header + "'");
  const std::size_t cols = split_csv_line(header).size();
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != cols) throw FormatError(path.string() + ": row with " + std::to_string(cells.size()) + " cells");
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

inline void emit_csv(const EvalReport& rep, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kEvalCsvHeader << "\n";
  for (const auto& r : rep.rows)
    out << r.attack << "," << fmt_num(r.epsilon) << "," << r.steps << "," << fmt_num(r.accuracy) << "," << r.correct
        << "," << r.total << "\n";
}

inline EvalReport read_eval_csv(const std::filesystem::path& path) {
  EvalReport rep;
  for (const auto& c : detail::read_csv(path, kEvalCsvHeader))
    rep.rows.push_back({c[0], parse_num(c[1]), std::stoi(c[2]), parse_num(c[3]), std::stoul(c[4]), std::stoul(c[5])});
  return rep;
}

inline void emit_csv(const SweepReport& rep, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kSweepCsvHeader << "\n";
  for (std::size_t e = 0; e < rep.epsilons.size(); ++e)
    for (std::size_t k = 0; k < rep.ratios.size(); ++k)
      out << to_string(rep.stage) << "," << fmt_num(rep.epsilons[e]) << "," << fmt_num(rep.ratios[k]) << ","
          << fmt_num(rep.accuracy[e][k]) << "," << fmt_num(rep.growth(e, k)) << "," << rep.correct[e][k] << ","
          << rep.total << "\n";
}

inline SweepReport read_sweep_csv(const std::filesystem::path& path) {
  SweepReport rep;
  for (const auto& c : detail::read_csv(path, kSweepCsvHeader)) {
    rep.stage = parse_stage(c[0]);
    const double eps = parse_num(c[1]), ratio = parse_num(c[2]);
    if (rep.epsilons.empty() || rep.epsilons.back() != eps) {
      rep.epsilons.push_back(eps);
      rep.accuracy.emplace_back();
      rep.correct.emplace_back();
    }
    if (rep.epsilons.size() == 1) rep.ratios.push_back(ratio);
    rep.accuracy.back().push_back(parse_num(c[3]));
    rep.correct.back().push_back(std::stoul(c[5]));
    rep.total = std::stoul(c[6]);
  }
  return rep;
}

inline void emit_csv(const SquareSweepReport& rep, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kSquareSweepCsvHeader << "\n";
  for (std::size_t e = 0; e < rep.epsilons.size(); ++e)
    for (auto mode : {SquareMode::keep_inside, SquareMode::keep_outside})
      for (std::size_t k = 0; k < rep.widths.size(); ++k)
        out << to_string(rep.stage) << "," << fmt_num(rep.epsilons[e]) << ","
            << (mode == SquareMode::keep_inside ? "keep_inside" : "keep_outside") << "," << rep.widths[k] << ","
            << fmt_num(rep.accuracy(e, k, mode)) << ","
            << (mode == SquareMode::keep_inside ? rep.inside : rep.outside)[e][k] << "," << rep.total << "\n";
}

inline void emit_csv(const TransferTable& tab, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kTransferCsvHeader << "\n";
  for (std::size_t a = 0; a < tab.attacks.size(); ++a)
    for (std::size_t s = 0; s < tab.sources.size(); ++s)
      for (std::size_t t = 0; t < tab.targets.size(); ++t)
        out << tab.attacks[a] << "," << tab.sources[s] << "," << tab.targets[t] << ","
            << fmt_num(tab.accuracy[a][s][t]) << "\n";
}

inline void emit_csv(const std::vector<EpochStats>& history, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kEpochCsvHeader << "\n";
  for (const auto& s : history)
    out << s.epoch << "," << fmt_num(s.lr) << "," << fmt_num(s.loss_total) << "," << fmt_num(s.loss_at) << ","
        << fmt_num(s.loss_far) << "," << fmt_num(s.train_acc) << "," << fmt_num(s.seconds) << "\n";
}

// ---------------------------------------------------------------------------
// SVG plot: accuracy vs ratio per epsilon (top), growth bars (bottom)

inline void emit_plot(const SweepReport& rep, const std::filesystem::path& path) {
  constexpr double W = 720, H = 560, L = 70, R = 150, top0 = 30, panel = 210, gap = 70;
  const double pw = W - L - R;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  const std::size_t nr = rep.ratios.size();
  auto xpos = [&](std::size_t k) { return L + (nr > 1 ? pw * double(k) / double(nr - 1) : pw / 2); };
  double gmin = 0, gmax = 0;
  for (std::size_t e = 0; e < rep.epsilons.size(); ++e)
    for (std::size_t k = 0; k < nr; ++k) {
      gmin = std::min(gmin, rep.growth(e, k));
      gmax = std::max(gmax, rep.growth(e, k));
    }
  if (gmax - gmin < 1e-9) gmax = gmin + 0.01;

  auto out = detail::open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const double top1 = top0 + panel + gap;
  for (double y0 : {top0, top1})
    out << "<rect x=\"" << L << "\" y=\"" << y0 << "\" width=\"" << pw << "\" height=\"" << panel
        << "\" fill=\"none\" stroke=\"black\"/>\n";
  out << "<text x=\"" << L << "\" y=\"" << top0 - 10 << "\">accuracy vs retained frequency ratio ("
      << to_string(rep.stage) << ")</text>\n";
  out << "<text x=\"" << L << "\" y=\"" << top1 - 10 << "\">growth rate per ratio step</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = top0 + panel * (1 - t / 4.0);
    out << "<text x=\"" << L - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fmt_num(t / 4.0) << "</text>\n";
  }
  for (std::size_t k = 0; k < nr; ++k) {
    out << "<text x=\"" << xpos(k) << "\" y=\"" << top0 + panel + 16 << "\" text-anchor=\"middle\">"
        << fmt_num(rep.ratios[k]) << "</text>\n";
    out << "<text x=\"" << xpos(k) << "\" y=\"" << top1 + panel + 16 << "\" text-anchor=\"middle\">"
        << fmt_num(rep.ratios[k]) << "</text>\n";
  }
  const double zero_y = top1 + panel * (gmax / (gmax - gmin));
  out << "<line x1=\"" << L << "\" x2=\"" << L + pw << "\" y1=\"" << zero_y << "\" y2=\"" << zero_y
      << "\" stroke=\"gray\"/>\n";
  const double slot = pw / double(std::max<std::size_t>(nr, 1)) / double(std::max<std::size_t>(rep.epsilons.size(), 1));
  for (std::size_t e = 0; e < rep.epsilons.size(); ++e) {
    const char* col = colors[e % 7];
    out << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < nr; ++k) out << xpos(k) << "," << top0 + panel * (1 - rep.accuracy[e][k]) << " ";
    out << "\"/>\n";
    for (std::size_t k = 1; k < nr; ++k) {
      const double g = rep.growth(e, k);
      const double y = top1 + panel * ((gmax - std::max(g, 0.0)) / (gmax - gmin));
      const double h = panel * std::abs(g) / (gmax - gmin);
      out << "<rect x=\"" << xpos(k) - slot * double(rep.epsilons.size()) / 2 + slot * double(e) << "\" y=\"" << y
          << "\" width=\"" << slot * 0.9 << "\" height=\"" << h << "\" fill=\"" << col << "\"/>\n";
    }
    out << "<text x=\"" << L + pw + 12 << "\" y=\"" << top0 + 14 + 16 * double(e) << "\" fill=\"" << col
        << "\">eps=" << fmt_num(std::round(rep.epsilons[e] * 255.0 * 100) / 100) << "/255</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace hfdr
