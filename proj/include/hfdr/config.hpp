#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hfdr/attacks.hpp"
#include "hfdr/losses.hpp"
#include "hfdr/models.hpp"

namespace hfdr {

using json = nlohmann::json;

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_milestones{15, 18};
  double lr_gamma = 0.1;
  AttackConfig attack;  // inner maximization, PGD-10 by default
  LossConfig loss;
  bool awp_enabled = false;
  double awp_gamma = 0.005;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("train: lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train: momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    if (!(lr_gamma > 0 && lr_gamma <= 1)) throw ConfigError("train: lr_gamma must be in (0,1]");
    for (std::size_t i = 1; i < lr_milestones.size(); ++i)
      if (lr_milestones[i] <= lr_milestones[i - 1])
        throw ConfigError("train: lr_milestones must be strictly increasing");
    if (awp_gamma < 0) throw ConfigError("train: awp_gamma must be >= 0");
    attack.validate();
    loss.validate();
  }
};

/// lr * gamma^(number of milestones <= epoch).
inline double lr_at(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw ArgumentError("lr_at: epoch must be >= 0");
  double lr = cfg.lr;
  for (int m : cfg.lr_milestones)
    if (m <= epoch) lr *= cfg.lr_gamma;
  return lr;
}

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar10
  std::string dir;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t synth_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (source != "synthetic" && source != "cifar10")
      throw ConfigError("data: unknown source '" + source + "'");
    if (source == "cifar10" && dir.empty()) throw ConfigError("data: cifar10 needs 'dir'");
    if (train_per_class == 0 || test_per_class == 0) throw ConfigError("data: per-class counts must be positive");
    if (synth_size < 8) throw ConfigError("data: synth_size must be >= 8");
  }
};

struct RunConfig {
  ModelSpec model;
  TrainConfig train;
  DataConfig data;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
  }
};

// ---------------------------------------------------------------------------
// Enum text

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw_pgd: return "cw";
    case AttackKind::ssa: return "ssa";
  }
  return "?";
}
inline std::string to_string(LossForm f) {
  return f == LossForm::ce ? "ce" : f == LossForm::margin ? "margin" : "kl";
}
inline std::string to_string(AtKind k) {
  return k == AtKind::pgd_at ? "pgd_at" : k == AtKind::trades ? "trades" : "mart";
}
inline std::string to_string(FarSource s) {
  return s == FarSource::adversarial ? "adversarial" : s == FarSource::clean ? "clean" : "both";
}
inline std::string to_string(NormKind k) { return k == NormKind::l1 ? "l1" : "l2"; }

namespace detail {

template <typename E>
E parse_enum(const std::string& key, const std::string& text, std::initializer_list<E> options) {
  std::string allowed;
  for (E e : options) {
    if (to_string(e) == text) return e;
    allowed += (allowed.empty() ? "" : ", ") + to_string(e);
  }
  throw ConfigError("invalid value '" + text + "' for key '" + key + "' (expected " + allowed + ")");
}

/// Reads keys of one JSON object; anything not consumed is reported as an
/// unknown key.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + full(key) + "' has the wrong type");
    }
  }

  template <typename E>
  void get_enum(const char* key, E& out, std::initializer_list<E> options) {
    std::string text;
    get(key, text);
    if (!text.empty()) out = parse_enum(full(key), text, options);
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& sub(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + full(it.key()) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// JSON <-> structs

inline json to_json(const ModelSpec& s) {
  return json{{"arch", to_string(s.arch)},
              {"num_classes", s.num_classes},
              {"hfdr_enabled", s.hfdr_enabled},
              {"hfdr_position", to_string(s.hfdr_position)},
              {"input_shape", s.input_shape},
              {"width", s.width},
              {"tau", s.tau},
              {"hfdr_train_noise", s.hfdr_train_noise},
              {"hfdr_eval_noise", s.hfdr_eval_noise},
              {"normalize_input", s.normalize_input}};
}

inline ModelSpec model_spec_from_json(const json& j, const std::string& path = "model") {
  ModelSpec s;
  detail::Section sec(j, path);
  std::string arch, pos;
  sec.get("arch", arch);
  if (!arch.empty()) s.arch = parse_arch(arch);
  sec.get("num_classes", s.num_classes);
  sec.get("hfdr_enabled", s.hfdr_enabled);
  sec.get("hfdr_position", pos);
  if (!pos.empty()) {
    try {
      s.hfdr_position = parse_stage(pos);
    } catch (const ArgumentError&) {
      throw ConfigError("invalid value '" + pos + "' for key '" + sec.full("hfdr_position") + "'");
    }
  }
  sec.get("input_shape", s.input_shape);
  sec.get("width", s.width);
  sec.get("tau", s.tau);
  sec.get("hfdr_train_noise", s.hfdr_train_noise);
  sec.get("hfdr_eval_noise", s.hfdr_eval_noise);
  sec.get("normalize_input", s.normalize_input);
  sec.finish();
  s.validate();
  return s;
}

inline json to_json(const AttackConfig& a) {
  return json{{"kind", to_string(a.kind)},        {"epsilon", a.epsilon},
              {"alpha", a.alpha},                 {"steps", a.steps},
              {"random_start", a.random_start},   {"ssa_spectrum_sigma", a.ssa_spectrum_sigma},
              {"ssa_samples", a.ssa_samples},     {"loss_form", to_string(a.loss_form)}};
}

inline AttackConfig attack_from_json(const json& j, const std::string& path = "attack") {
  AttackConfig a;
  detail::Section sec(j, path);
  sec.get_enum("kind", a.kind, {AttackKind::fgsm, AttackKind::pgd, AttackKind::cw_pgd, AttackKind::ssa});
  if (sec.has("epsilon")) {
    const json& e = sec.sub("epsilon");
    if (e.is_string())
      a.epsilon = parse_epsilon(e.get<std::string>());
    else if (e.is_number())
      a.epsilon = e.get<double>();
    else
      throw ConfigError("config key '" + sec.full("epsilon") + "' has the wrong type");
  }
  sec.get("alpha", a.alpha);
  sec.get("steps", a.steps);
  sec.get("random_start", a.random_start);
  sec.get("ssa_spectrum_sigma", a.ssa_spectrum_sigma);
  sec.get("ssa_samples", a.ssa_samples);
  sec.get_enum("loss_form", a.loss_form, {LossForm::ce, LossForm::margin, LossForm::kl});
  sec.finish();
  a.validate();
  return a;
}

inline json to_json(const LossConfig& l) {
  return json{{"at_kind", to_string(l.at_kind)}, {"beta_trades", l.beta_trades},
              {"beta_mart", l.beta_mart},        {"lambda_far", l.lambda_far},
              {"beta_far", l.beta_far},          {"p_far", l.p_far},
              {"norm", to_string(l.norm_kind)},  {"far_source", to_string(l.far_source)}};
}

inline LossConfig loss_from_json(const json& j, const std::string& path = "loss") {
  LossConfig l;
  detail::Section sec(j, path);
  sec.get_enum("at_kind", l.at_kind, {AtKind::pgd_at, AtKind::trades, AtKind::mart});
  sec.get("beta_trades", l.beta_trades);
  sec.get("beta_mart", l.beta_mart);
  sec.get("lambda_far", l.lambda_far);
  sec.get("beta_far", l.beta_far);
  sec.get("p_far", l.p_far);
  sec.get_enum("norm", l.norm_kind, {NormKind::l1, NormKind::l2});
  sec.get_enum("far_source", l.far_source, {FarSource::adversarial, FarSource::clean, FarSource::both});
  sec.finish();
  l.validate();
  return l;
}

inline json to_json(const TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"lr_milestones", t.lr_milestones},
              {"lr_gamma", t.lr_gamma},
              {"attack", to_json(t.attack)},
              {"loss", to_json(t.loss)},
              {"awp_enabled", t.awp_enabled},
              {"awp_gamma", t.awp_gamma},
              {"augment", t.augment},
              {"seed", t.seed}};
}

inline json to_json(const DataConfig& d) {
  return json{{"source", d.source},
              {"dir", d.dir},
              {"train_per_class", d.train_per_class},
              {"test_per_class", d.test_per_class},
              {"synth_size", d.synth_size},
              {"seed", d.seed}};
}

/// Sections: model, train, attack, loss, data. Every section is optional.
inline RunConfig run_config_from_json(const json& j) {
  RunConfig rc;
  detail::Section top(j, "");
  if (top.has("model")) rc.model = model_spec_from_json(top.sub("model"));
  if (top.has("attack")) rc.train.attack = attack_from_json(top.sub("attack"));
  if (top.has("loss")) rc.train.loss = loss_from_json(top.sub("loss"));
  if (top.has("train")) {
    detail::Section sec(top.sub("train"), "train");
    TrainConfig& t = rc.train;
    sec.get("epochs", t.epochs);
    sec.get("batch_size", t.batch_size);
    sec.get("lr", t.lr);
    sec.get("momentum", t.momentum);
    sec.get("weight_decay", t.weight_decay);
    sec.get("lr_milestones", t.lr_milestones);
    sec.get("lr_gamma", t.lr_gamma);
    sec.get("awp_enabled", t.awp_enabled);
    sec.get("awp_gamma", t.awp_gamma);
    sec.get("augment", t.augment);
    sec.get("seed", t.seed);
    sec.finish();
  }
  if (top.has("data")) {
    detail::Section sec(top.sub("data"), "data");
    DataConfig& d = rc.data;
    sec.get("source", d.source);
    sec.get("dir", d.dir);
    sec.get("train_per_class", d.train_per_class);
    sec.get("test_per_class", d.test_per_class);
    sec.get("synth_size", d.synth_size);
    sec.get("seed", d.seed);
    sec.finish();
  }
  top.finish();
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline json to_json(const RunConfig& rc) {
  json j = {{"model", to_json(rc.model)}, {"train", to_json(rc.train)}, {"data", to_json(rc.data)}};
  j["attack"] = j["train"]["attack"];
  j["loss"] = j["train"]["loss"];
  j["train"].erase("attack");
  j["train"].erase("loss");
  return j;
}

/// 64-bit FNV-1a, hex.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

/// Stable hash of the canonical (key-sorted, compact) config text.
inline std::string config_digest(const TrainConfig& t) { return fnv1a_hex(to_json(t).dump()); }

}  // namespace hfdr
