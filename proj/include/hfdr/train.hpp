#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hfdr/attacks.hpp"
#include "hfdr/config.hpp"
#include "hfdr/data.hpp"
#include "hfdr/losses.hpp"
#include "hfdr/models.hpp"

namespace hfdr {

struct TrainError : std::runtime_error {
  TrainError(const std::string& what, std::size_t batch) : std::runtime_error(what), batch_index(batch) {}
  std::size_t batch_index;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double loss_total = 0;
  double loss_at = 0;
  double loss_far = 0;  // NaN when the model has no HFDR block
  double train_acc = 0;
  double seconds = 0;
  std::size_t examples = 0;

  bool operator==(const EpochStats&) const = default;
};

// ---------------------------------------------------------------------------
// SGD with momentum and coupled weight decay

template <typename T>
struct SgdState {
  std::map<std::string, Tensor<T>> momentum;
};

/// buf' = m * buf + g + wd * w ;  w' = w - lr * buf'.
/// The decay part is applied as a multiplication by (1 - lr * wd) so that a
/// step with zero gradient and empty momentum scales weights by exactly that
/// factor.
template <typename T>
void sgd_step(Model<T>& model, SgdState<T>& state, double lr, double momentum, double weight_decay) {
  const T shrink = T(1.0 - lr * weight_decay), tl = T(lr), tm = T(momentum), twd = T(weight_decay);
  for (auto& p : model.parameters()) {
    Tensor<T>& w = p.var->mutable_value();
    auto [it, fresh] = state.momentum.try_emplace(p.name, w.shape());
    Tensor<T>& buf = it->second;
    const bool has_grad = p.var->has_grad();
    const Tensor<T>* g = has_grad ? &p.var->node()->grad : nullptr;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = g ? (*g)[i] : T{0};
      const T carried = tm * buf[i] + gi;
      buf[i] = carried + twd * w[i];
      w[i] = w[i] * shrink - tl * carried;
    }
  }
}

// ---------------------------------------------------------------------------
// Adversarial weight perturbation

/// gamma * ||w|| * g / ||g||; all zeros when gamma or ||g|| is zero.
template <typename T>
Tensor<T> awp_direction(const Tensor<T>& w, const Tensor<T>& g, double gamma) {
  w.check_same(g, "awp_direction");
  Tensor<T> d(w.shape());
  const double gn = l2_norm(g);
  if (gamma == 0.0 || gn == 0.0) return d;
  const double scale = gamma * l2_norm(w) / gn;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = T(scale * double(g[i]));
  return d;
}

/// Per-tensor weight offsets. apply() stores the current weights; revert()
/// writes them back, so apply + revert is bitwise exact.
template <typename T>
struct WeightPerturbation {
  std::map<std::string, Tensor<T>> deltas;

  double norm(const std::string& name) const { return l2_norm(deltas.at(name)); }

  void apply(Model<T>& model) {
    if (!saved_.empty()) throw ArgumentError("weight perturbation already applied");
    for (auto& p : model.parameters()) {
      auto it = deltas.find(p.name);
      if (it == deltas.end()) continue;
      saved_.emplace(p.name, p.var->value());
      p.var->mutable_value() += it->second;
    }
  }

  void revert(Model<T>& model) {
    for (auto& p : model.parameters()) {
      auto it = saved_.find(p.name);
      if (it != saved_.end()) p.var->mutable_value() = it->second;
    }
    saved_.clear();
  }

 private:
  std::map<std::string, Tensor<T>> saved_;
};

/// Layerwise-normalized ascent direction of `loss_fn` over every weight
/// tensor of rank >= 2 (convolution and linear weights). BN running
/// statistics touched by `loss_fn` are restored afterwards.
template <typename T>
WeightPerturbation<T> awp_perturb(Model<T>& model, const std::function<Var<T>()>& loss_fn, double gamma) {
  if (gamma < 0) throw ArgumentError("awp_perturb: gamma must be >= 0");
  WeightPerturbation<T> wp;
  std::vector<Tensor<T>> saved_buffers;
  for (auto& b : model.buffers()) saved_buffers.push_back(*b.tensor);
  model.zero_grad();
  backward(loss_fn());
  for (auto& p : model.parameters())
    if (p.var->value().rank() >= 2) wp.deltas.emplace(p.name, awp_direction(p.var->value(), p.var->grad(), gamma));
  model.zero_grad();
  auto bufs = model.buffers();
  for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].tensor = saved_buffers[i];
  return wp;
}

/// Convenience form: cross-entropy on an adversarial batch.
template <typename T>
WeightPerturbation<T> awp_perturb(Model<T>& model, const Tensor<T>& x_adv, std::span<const int> labels,
                                  double gamma, Rng& rng) {
  return awp_perturb<T>(
      model, [&] { return ce_loss(model.forward(Var<T>(x_adv), Mode::train, &rng).logits, labels); }, gamma);
}

// ---------------------------------------------------------------------------
// Outer objective

template <typename T>
struct OuterLoss {
  Var<T> total, at, far;  // far is empty without an HFDR block
  Tensor<T> logits;       // logits the accuracy is measured on
};

template <typename T>
OuterLoss<T> outer_loss(Model<T>& model, const Tensor<T>& x, const Tensor<T>& x_adv, std::span<const int> labels,
                        const LossConfig& lc, Rng& rng) {
  OuterLoss<T> out;
  const bool need_clean = lc.at_kind != AtKind::pgd_at ||
                          (model.hfdr() && lc.far_source != FarSource::adversarial);
  typename Model<T>::Output clean, adv = model.forward(Var<T>(x_adv), Mode::train, &rng);
  if (need_clean) clean = model.forward(Var<T>(x), Mode::train, &rng);
  switch (lc.at_kind) {
    case AtKind::pgd_at: out.at = ce_loss(adv.logits, labels); break;
    case AtKind::trades: out.at = trades_loss(clean.logits, adv.logits, labels, T(lc.beta_trades)); break;
    case AtKind::mart: out.at = mart_loss(clean.logits, adv.logits, labels, T(lc.beta_mart)); break;
  }
  out.logits = adv.logits.value();
  out.total = out.at;
  if (model.hfdr()) {
    auto far_of = [&](const typename Model<T>::Output& o) {
      return far_loss(o.hfdr->attention_hf, T(lc.beta_far), T(lc.p_far), lc.norm_kind);
    };
    switch (lc.far_source) {
      case FarSource::adversarial: out.far = far_of(adv); break;
      case FarSource::clean: out.far = far_of(clean); break;
      case FarSource::both: out.far = mul_scalar(add(far_of(adv), far_of(clean)), T{0.5}); break;
    }
    out.total = total_loss(out.at, out.far, T(lc.lambda_far));
  }
  return out;
}

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T* row = logits.data() + i * k;
    if (std::size_t(std::max_element(row, row + k) - row) == std::size_t(labels[i])) ++correct;
  }
  return correct;
}

/// Inner maximization against the eval-mode model with parameter gradients
/// off. TRADES uses the KL form against the clean logits.
template <typename T>
Tensor<T> inner_attack(Model<T>& model, const Tensor<T>& x, std::span<const int> labels, const TrainConfig& cfg,
                       Rng& rng) {
  if (cfg.attack.epsilon == 0.0) return x;
  FrozenParams<T> frozen(model);
  LogitsFn<T> f = [&](const Var<T>& v) { return model.logits(v, Mode::eval); };
  AttackConfig ac = cfg.attack;
  if (cfg.loss.at_kind == AtKind::trades) {
    ac.loss_form = LossForm::kl;
    if (ac.kind == AttackKind::cw_pgd || ac.kind == AttackKind::fgsm) ac.kind = AttackKind::pgd;
    const Tensor<T> clean = model.logits(Var<T>(x), Mode::eval).value();
    return run_attack(f, x, labels, ac, rng, &clean);
  }
  return run_attack(f, x, labels, ac, rng);
}

template <typename T>
EpochStats train_epoch(Model<T>& model, const Dataset<T>& data, const TrainConfig& cfg, int epoch,
                       SgdState<T>& opt, Rng& rng) {
  cfg.validate();
  if (data.image_shape() != Shape{model.spec().input_shape.begin(), model.spec().input_shape.end()})
    throw ArgumentError("train_epoch: dataset images " + shape_str(data.image_shape()) + " do not match the model");
  const auto t0 = std::chrono::steady_clock::now();
  EpochStats st;
  st.epoch = epoch;
  st.lr = lr_at(cfg, epoch);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  double sum_total = 0, sum_at = 0, sum_far = 0;
  std::size_t correct = 0;
  const bool has_far = model.hfdr() != nullptr;
  for (std::size_t begin = 0, batch = 0; begin < order.size(); begin += cfg.batch_size, ++batch) {
    const std::vector<std::size_t> idx(order.begin() + long(begin),
                                       order.begin() + long(std::min(order.size(), begin + cfg.batch_size)));
    Tensor<T> x = data.batch_images(idx);
    const std::vector<int> y = data.batch_labels(idx);
    if (cfg.augment) x = augment(x, rng);
    const Tensor<T> x_adv = inner_attack(model, x, y, cfg, rng);

    std::optional<WeightPerturbation<T>> wp;
    if (cfg.awp_enabled) {
      wp = awp_perturb<T>(model, [&] { return outer_loss(model, x, x_adv, y, cfg.loss, rng).at; }, cfg.awp_gamma);
      wp->apply(model);
    }
    model.zero_grad();
    OuterLoss<T> loss = outer_loss(model, x, x_adv, y, cfg.loss, rng);
    const double total = loss.total.item(), at = loss.at.item();
    const double far = has_far ? double(loss.far.item()) : 0.0;
    if (!std::isfinite(total) || !std::isfinite(at) || !std::isfinite(far)) {
      if (wp) wp->revert(model);
      std::ostringstream os;
      os << "non-finite loss at epoch " << epoch << " batch " << batch << ": total=" << total << " at=" << at
         << " far=" << far;
      throw TrainError(os.str(), batch);
    }
    backward(loss.total);
    if (wp) wp->revert(model);
    sgd_step(model, opt, st.lr, cfg.momentum, cfg.weight_decay);

    const double n = double(idx.size());
    sum_total += total * n;
    sum_at += at * n;
    sum_far += far * n;
    correct += count_correct(loss.logits, y);
  }
  model.zero_grad();
  const double n = double(std::max<std::size_t>(1, data.size()));
  st.examples = data.size();
  st.loss_total = sum_total / n;
  st.loss_at = sum_at / n;
  st.loss_far = has_far ? sum_far / n : std::nan("");
  st.train_acc = double(correct) / n;
  st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st;
}

/// Runs epochs [first_epoch, cfg.epochs); `on_epoch` sees each result.
template <typename T>
std::vector<EpochStats> fit(Model<T>& model, const Dataset<T>& data, const TrainConfig& cfg, SgdState<T>& opt,
                            Rng& rng, int first_epoch = 0,
                            const std::function<void(const EpochStats&)>& on_epoch = {}) {
  std::vector<EpochStats> history;
  for (int e = first_epoch; e < cfg.epochs; ++e) {
    history.push_back(train_epoch(model, data, cfg, e, opt, rng));
    if (on_epoch) on_epoch(history.back());
  }
  return history;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "HFDRCKPT <manifest bytes>\n", a pretty-printed JSON manifest, then
// the raw little-endian tensor bytes at the offsets listed in the manifest.

inline constexpr int kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  int format_version = kCheckpointVersion;
  ModelSpec spec;
  std::string config_digest;
  json train_config;
  int epoch = 0;
  std::vector<EpochStats> history;
  std::map<std::string, Tensor<T>> params;     // parameters and BN buffers
  std::map<std::string, Tensor<T>> optimizer;  // momentum buffers
  bool digest_mismatch = false;                // set by load_checkpoint
};

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

inline json to_json(const EpochStats& s) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return json{{"epoch", s.epoch},         {"lr", s.lr},           {"loss_total", num(s.loss_total)},
              {"loss_at", num(s.loss_at)}, {"loss_far", num(s.loss_far)}, {"train_acc", s.train_acc},
              {"seconds", s.seconds},     {"examples", s.examples}};
}

inline EpochStats epoch_stats_from_json(const json& j) {
  auto num = [&](const char* k) { return j.at(k).is_null() ? std::nan("") : j.at(k).get<double>(); };
  EpochStats s;
  s.epoch = j.at("epoch").get<int>();
  s.lr = num("lr");
  s.loss_total = num("loss_total");
  s.loss_at = num("loss_at");
  s.loss_far = num("loss_far");
  s.train_acc = num("train_acc");
  s.seconds = num("seconds");
  s.examples = j.at("examples").get<std::size_t>();
  return s;
}

template <typename T>
Checkpoint<T> make_checkpoint(Model<T>& model, const SgdState<T>& opt, const TrainConfig& cfg, int epoch,
                              std::vector<EpochStats> history) {
  Checkpoint<T> c;
  c.spec = model.spec();
  c.config_digest = config_digest(cfg);
  c.train_config = to_json(cfg);
  c.epoch = epoch;
  c.history = std::move(history);
  c.params = model.state();
  c.optimizer = opt.momentum;
  return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& c) {
  json tensors = json::array();
  std::size_t offset = 0;
  auto manifest_of = [&](const std::string& group, const std::map<std::string, Tensor<T>>& m) {
    for (const auto& [name, t] : m) {
      tensors.push_back(json{{"group", group},
                             {"name", name},
                             {"dtype", dtype_name<T>()},
                             {"shape", t.shape()},
                             {"offset", offset},
                             {"bytes", t.size() * sizeof(T)}});
      offset += t.size() * sizeof(T);
    }
  };
  manifest_of("param", c.params);
  manifest_of("optim", c.optimizer);
  json history = json::array();
  for (const auto& s : c.history) history.push_back(to_json(s));
  const json manifest{{"format_version", c.format_version},
                      {"byte_order", "little"},
                      {"model_spec", to_json(c.spec)},
                      {"config_digest", c.config_digest},
                      {"train_config", c.train_config},
                      {"epoch", c.epoch},
                      {"history", history},
                      {"tensors", tensors}};
  const std::string text = manifest.dump(2) + "\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << "HFDRCKPT " << text.size() << "\n" << text;
  for (const auto* m : {&c.params, &c.optimizer})
    for (const auto& [name, t] : *m)
      out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

/// A non-empty `expected_digest` that differs from the stored one produces a
/// warning on stderr and sets `digest_mismatch`.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const std::string& expected_digest = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string magic;
  std::size_t manifest_bytes = 0;
  in >> magic >> manifest_bytes;
  if (magic != "HFDRCKPT" || !in || in.get() != '\n')
    throw FormatError(path.string() + " is not a checkpoint file");
  std::string text(manifest_bytes, '\0');
  in.read(text.data(), std::streamsize(manifest_bytes));
  if (!in) throw FormatError(path.string() + ": truncated manifest");
  json m;
  try {
    m = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad manifest: " + e.what());
  }
  Checkpoint<T> c;
  c.format_version = m.at("format_version").get<int>();
  if (c.format_version != kCheckpointVersion)
    throw CheckpointError(path.string() + ": checkpoint format_version " + std::to_string(c.format_version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  if (m.value("byte_order", "little") != "little") throw FormatError(path.string() + ": unsupported byte order");
  c.spec = model_spec_from_json(m.at("model_spec"), "model_spec");
  c.config_digest = m.at("config_digest").get<std::string>();
  c.train_config = m.value("train_config", json::object());
  c.epoch = m.at("epoch").get<int>();
  for (const auto& h : m.at("history")) c.history.push_back(epoch_stats_from_json(h));
  const auto body_start = in.tellg();
  for (const auto& t : m.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    if (t.at("dtype").get<std::string>() != dtype_name<T>())
      throw FormatError(path.string() + ": tensor '" + name + "' is " + t.at("dtype").get<std::string>() +
                        ", reader expects " + dtype_name<T>());
    Tensor<T> tensor(t.at("shape").get<Shape>());
    if (t.at("bytes").get<std::size_t>() != tensor.size() * sizeof(T))
      throw FormatError(path.string() + ": tensor '" + name + "' byte count does not match its shape");
    in.seekg(body_start + std::streamoff(t.at("offset").get<std::size_t>()));
    in.read(reinterpret_cast<char*>(tensor.data()), std::streamsize(tensor.size() * sizeof(T)));
    if (!in) throw FormatError(path.string() + ": truncated data for tensor '" + name + "'");
    (t.at("group").get<std::string>() == "optim" ? c.optimizer : c.params)[name] = std::move(tensor);
  }
  if (!expected_digest.empty() && expected_digest != c.config_digest) {
    c.digest_mismatch = true;
    std::cerr << "warning: " << path.string() << " was trained with config digest " << c.config_digest
              << ", current config digest is " << expected_digest << "\n";
  }
  return c;
}

/// Builds the checkpoint's model and loads its tensors.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint<T>& c) {
  Model<T> m = build_model<T>(c.spec, 0);
  m.load_state(c.params);
  return m;
}

}  // namespace hfdr
