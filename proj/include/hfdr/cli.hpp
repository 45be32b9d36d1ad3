#pragma once

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hfdr/analysis.hpp"
#include "hfdr/config.hpp"
#include "hfdr/data.hpp"
#include "hfdr/selftest.hpp"
#include "hfdr/train.hpp"

namespace hfdr {

/// "pgd:8:10", "fgsm:8", "cw:8:30", "ssa:8:10[:sigma[:samples]]". Epsilon
/// follows parse_epsilon (integers are in 1/255 units).
inline AttackConfig parse_attack_spec(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  auto bad = [&] { return ConfigError("invalid attack spec '" + spec + "'"); };
  if (parts.size() < 2) throw bad();
  const double eps = parse_epsilon(parts[1]);
  auto steps_at = [&](std::size_t i, int dflt) {
    if (parts.size() <= i) return dflt;
    try {
      return std::stoi(parts[i]);
    } catch (const std::exception&) {
      throw bad();
    }
  };
  AttackConfig c;
  if (parts[0] == "fgsm" && parts.size() == 2) {
    c = AttackConfig::make_fgsm(eps);
  } else if (parts[0] == "pgd" && parts.size() <= 3) {
    c = AttackConfig::make_pgd(eps, steps_at(2, 10));
  } else if (parts[0] == "cw" && parts.size() <= 3) {
    c = AttackConfig::make_cw(eps, steps_at(2, 30));
  } else if (parts[0] == "ssa" && parts.size() <= 5) {
    c = AttackConfig::make_ssa(eps, steps_at(2, 10), parts.size() > 3 ? std::stod(parts[3]) : 0.5,
                               parts.size() > 4 ? std::stoi(parts[4]) : 4);
  } else {
    throw bad();
  }
  c.validate();
  return c;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ',');)
    if (!p.empty()) out.push_back(p);
  return out;
}

/// Train and test splits as described by the data section.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> make_datasets(const DataConfig& d) {
  d.validate();
  if (d.source == "synthetic") {
    auto train = synth_freq_dataset<T>(d.train_per_class, d.synth_size, d.seed);
    auto test = synth_freq_dataset<T>(d.test_per_class, d.synth_size, d.seed + 1);
    test.split = "test";
    return {std::move(train), std::move(test)};
  }
  auto [train, test] = load_cifar10<T>(d.dir);
  return {subset(train, d.train_per_class, d.seed), subset(test, d.test_per_class, d.seed)};
}

namespace detail {

using Real = float;

inline RunConfig config_for_checkpoint(const Checkpoint<Real>& c, const std::string& config_path) {
  if (!config_path.empty()) return load_run_config(config_path);
  if (c.train_config.contains("data")) return run_config_from_json(c.train_config);
  RunConfig rc;
  rc.model = c.spec;
  return rc;
}

inline int cmd_train(const std::string& config_path, const std::string& out, const std::string& epochs_csv,
                     const std::string& resume) {
  const RunConfig rc = load_run_config(config_path);
  auto [train, test] = make_datasets<Real>(rc.data);
  if (Shape(rc.model.input_shape.begin(), rc.model.input_shape.end()) != train.image_shape() ||
      rc.model.num_classes != train.num_classes)
    throw ConfigError("model input_shape/num_classes do not match the '" + rc.data.source + "' data");
  Model<Real> model = build_model<Real>(rc.model, rc.train.seed);
  SgdState<Real> opt;
  std::vector<EpochStats> history;
  int first = 0;
  if (!resume.empty()) {
    auto c = load_checkpoint<Real>(resume, config_digest(rc.train));
    model.load_state(c.params);
    opt.momentum = c.optimizer;
    history = c.history;
    first = c.epoch;
  }
  Rng rng(rc.train.seed + std::uint64_t(first) * 7919);
  fit(model, train, rc.train, opt, rng, first, [&](const EpochStats& s) {
    history.push_back(s);
    std::cout << "epoch " << s.epoch << " lr " << fmt_num(s.lr) << " loss " << fmt_num(s.loss_total) << " at "
              << fmt_num(s.loss_at) << " far " << fmt_num(s.loss_far) << " acc " << fmt_num(s.train_acc) << " ("
              << fmt_num(std::round(s.seconds * 10) / 10) << "s)\n";
    auto ck = make_checkpoint(model, opt, rc.train, s.epoch + 1, history);
    ck.train_config = to_json(rc);
    save_checkpoint(out, ck);
  });
  if (rc.train.epochs == first) {
    auto ck = make_checkpoint(model, opt, rc.train, first, history);
    ck.train_config = to_json(rc);
    save_checkpoint(out, ck);
  }
  if (!epochs_csv.empty()) emit_csv(history, epochs_csv);
  return 0;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& config_path, const std::string& attacks,
                    const std::string& out, std::uint64_t seed) {
  auto c = load_checkpoint<Real>(ckpt_path);
  Model<Real> model = model_from_checkpoint(c);
  const RunConfig rc = config_for_checkpoint(c, config_path);
  const auto test = make_datasets<Real>(rc.data).second;
  std::vector<AttackConfig> list;
  for (const auto& s : split_list(attacks)) list.push_back(parse_attack_spec(s));
  const EvalReport rep = evaluate_robustness(model, test, list, {200, seed});
  for (const auto& r : rep.rows) std::cout << r.attack << " eps " << fmt_num(r.epsilon) << " acc " << fmt_num(r.accuracy) << "\n";
  if (!out.empty()) emit_csv(rep, out);
  return 0;
}

inline int cmd_attack(const std::string& ckpt_path, const std::string& input, const std::string& attack,
                      const std::string& out, std::uint64_t seed) {
  auto c = load_checkpoint<Real>(ckpt_path);
  Model<Real> model = model_from_checkpoint(c);
  const Dataset<Real> ds = read_cifar_records<Real>(input);
  const AttackConfig ac = parse_attack_spec(attack);
  Dataset<Real> adv = ds;
  const auto batches = batch_indices(ds.size(), 200);
  const std::size_t per = ds.images.size() / ds.size();
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Tensor<Real> xa = attack_batch(model, ds.batch_images(batches[b]), ds.batch_labels(batches[b]), ac, seed, b);
    std::copy(xa.values().begin(), xa.values().end(), adv.images.data() + batches[b].front() * per);
  }
  write_cifar_records(out, adv);
  return 0;
}

inline int cmd_sweep(const std::string& ckpt_path, const std::string& config_path, const std::string& stage,
                     const std::string& ratios, const std::string& square, const std::string& eps,
                     const std::string& out, const std::string& plot, std::uint64_t seed) {
  auto c = load_checkpoint<Real>(ckpt_path);
  Model<Real> model = model_from_checkpoint(c);
  const RunConfig rc = config_for_checkpoint(c, config_path);
  const auto test = make_datasets<Real>(rc.data).second;
  std::vector<double> rs, es;
  std::vector<std::size_t> widths;
  try {
    for (const auto& r : split_list(ratios)) rs.push_back(parse_num(r));
    for (const auto& b : split_list(square)) widths.push_back(std::stoul(b));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("sweep: ") + e.what());
  }
  for (const auto& e : split_list(eps)) es.push_back(parse_epsilon(e));
  if (rs.empty()) rs = default_sweep_ratios();
  if (es.empty()) es = default_sweep_epsilons();
  SweepOptions opt;
  opt.seed = seed;
  StageId st;
  try {
    st = parse_stage(stage);
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (!widths.empty()) {
    const SquareSweepReport rep = square_sweep(model, test, st, widths, es, opt);
    for (std::size_t e = 0; e < es.size(); ++e)
      for (std::size_t k = 0; k < widths.size(); ++k)
        std::cout << "eps " << fmt_num(es[e]) << " B " << widths[k] << " inside "
                  << fmt_num(rep.accuracy(e, k, SquareMode::keep_inside)) << " outside "
                  << fmt_num(rep.accuracy(e, k, SquareMode::keep_outside)) << "\n";
    if (!out.empty()) emit_csv(rep, out);
    return 0;
  }
  const SweepReport rep = frequency_sweep(model, test, st, rs, es, opt);
  for (std::size_t e = 0; e < es.size(); ++e) {
    std::cout << "eps " << fmt_num(es[e]) << ":";
    for (std::size_t k = 0; k < rs.size(); ++k) std::cout << " " << fmt_num(rep.accuracy[e][k]);
    std::cout << "\n";
  }
  if (!out.empty()) emit_csv(rep, out);
  if (!plot.empty()) emit_plot(rep, plot);
  return 0;
}

inline int cmd_transfer(const std::string& ckpts, const std::string& config_path, const std::string& attacks,
                        const std::string& out, std::uint64_t seed) {
  const auto paths = split_list(ckpts);
  if (paths.empty()) throw ConfigError("transfer needs at least one checkpoint");
  std::vector<Model<Real>> models;
  std::vector<std::pair<std::string, Model<Real>*>> named;
  RunConfig rc;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    auto c = load_checkpoint<Real>(paths[i]);
    if (i == 0) rc = config_for_checkpoint(c, config_path);
    models.push_back(model_from_checkpoint(c));
  }
  for (std::size_t i = 0; i < paths.size(); ++i)
    named.emplace_back(std::filesystem::path(paths[i]).stem().string(), &models[i]);
  const auto test = make_datasets<Real>(rc.data).second;
  std::vector<AttackConfig> list;
  for (const auto& s : split_list(attacks)) list.push_back(parse_attack_spec(s));
  const TransferTable tab = transfer_matrix(named, named, list, test, {200, seed});
  if (!out.empty()) emit_csv(tab, out);
  return 0;
}

}  // namespace detail

/// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.
inline int cli_main(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"HFDR adversarial robustness toolkit"};
  app.require_subcommand(1);
  std::string config, out, csv, resume, ckpt, attacks = "pgd:8:10", input, stage = "conv1", ratios, square, eps,
      plot;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("-c,--config", config, "run config (JSON)")->required();
  train->add_option("-o,--out", out, "checkpoint path")->required();
  train->add_option("--epochs-csv", csv, "per-epoch statistics CSV");
  train->add_option("--resume", resume, "continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "robust accuracy of a checkpoint");
  eval->add_option("-k,--checkpoint", ckpt)->required();
  eval->add_option("-c,--config", config, "data section override");
  eval->add_option("-a,--attacks", attacks, "comma-separated attack specs, e.g. pgd:8:10,fgsm:8");
  eval->add_option("-o,--out", out, "report CSV");
  eval->add_option("--seed", seed);

  auto* attack = app.add_subcommand("attack", "write adversarial versions of CIFAR-format records");
  attack->add_option("-k,--checkpoint", ckpt)->required();
  attack->add_option("-i,--input", input, "CIFAR-10 binary records")->required();
  attack->add_option("-a,--attack", attacks, "attack spec");
  attack->add_option("-o,--out", out)->required();
  attack->add_option("--seed", seed);

  auto* sweep = app.add_subcommand("sweep", "accuracy vs retained frequency ratio");
  sweep->add_option("-k,--checkpoint", ckpt)->required();
  sweep->add_option("-c,--config", config, "data section override");
  sweep->add_option("--stage", stage, "conv1..conv4");
  sweep->add_option("--ratios", ratios, "comma-separated ratios in (0,1]");
  sweep->add_option("--square", square, "comma-separated square widths B; sweeps both square-mask modes instead");
  sweep->add_option("--eps", eps, "comma-separated epsilons (integers mean /255)");
  sweep->add_option("-o,--out", out, "sweep CSV");
  sweep->add_option("--plot", plot, "SVG plot");
  sweep->add_option("--seed", seed);

  auto* transfer = app.add_subcommand("transfer", "transfer-attack matrix between checkpoints");
  transfer->add_option("-k,--checkpoints", ckpt, "comma-separated checkpoints")->required();
  transfer->add_option("-c,--config", config, "data section override");
  transfer->add_option("-a,--attacks", attacks);
  transfer->add_option("-o,--out", out)->required();
  transfer->add_option("--seed", seed);

  auto* selftest = app.add_subcommand("selftest", "run the invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*train) return detail::cmd_train(config, out, csv, resume);
    if (*eval) return detail::cmd_eval(ckpt, config, attacks, out, seed);
    if (*attack) return detail::cmd_attack(ckpt, input, attacks, out, seed);
    if (*sweep) return detail::cmd_sweep(ckpt, config, stage, ratios, square, eps, out, plot, seed);
    if (*transfer) return detail::cmd_transfer(ckpt, config, attacks, out, seed);
    if (*selftest) {
      bool ok = true;
      for (const auto& r : run_selftest()) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
        ok = ok && r.pass;
      }
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace hfdr
