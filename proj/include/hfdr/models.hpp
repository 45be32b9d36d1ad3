#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hfdr/hfdr_layer.hpp"
#include "hfdr/ops.hpp"

namespace hfdr {

enum class Arch { small_cnn, resnet18_thin };
enum class StageId { conv1 = 0, conv2 = 1, conv3 = 2, conv4 = 3 };
enum class Mode { train, eval };

inline std::string to_string(Arch a) { return a == Arch::small_cnn ? "small_cnn" : "resnet18_thin"; }
inline std::string to_string(StageId s) { return "conv" + std::to_string(int(s) + 1); }

inline Arch parse_arch(const std::string& s) {
  if (s == "small_cnn") return Arch::small_cnn;
  if (s == "resnet18_thin") return Arch::resnet18_thin;
  throw ConfigError("unknown architecture '" + s + "'");
}

inline StageId parse_stage(const std::string& s) {
  for (int i = 0; i < 4; ++i)
    if (s == "conv" + std::to_string(i + 1)) return StageId(i);
  throw ArgumentError("unknown stage '" + s + "' (expected conv1..conv4)");
}

struct ModelSpec {
  Arch arch = Arch::small_cnn;
  int num_classes = 10;
  bool hfdr_enabled = false;
  StageId hfdr_position = StageId::conv1;
  std::array<std::size_t, 3> input_shape{3, 32, 32};
  std::size_t width = 16;  // channels after the first stage
  double tau = 1.0;
  bool hfdr_train_noise = true;
  bool hfdr_eval_noise = false;
  bool normalize_input = true;  // fixed CIFAR-10 mean/std as the first layer

  void validate() const {
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (width == 0) throw ConfigError("model: width must be positive");
    if (!(tau > 0)) throw ConfigError("model: tau must be positive");
    if (int(hfdr_position) < 0 || int(hfdr_position) > 3)
      throw ConfigError("model: invalid HFDR position for " + to_string(arch));
    if (input_shape[1] < 8 || input_shape[2] < 8) throw ConfigError("model: input must be at least 8x8");
  }

  bool operator==(const ModelSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct BatchNorm2d {
  Var<T> gamma, beta;
  Tensor<T> running_mean, running_var;

  explicit BatchNorm2d(std::size_t c = 0)
      : gamma(Tensor<T>({c}, T{1}), true),
        beta(Tensor<T>({c}), true),
        running_mean({c}),
        running_var({c}, T{1}) {}

  Var<T> forward(const Var<T>& x, Mode mode) {
    const bool train = mode == Mode::train;
    return batch_norm(x, gamma, beta, running_mean, running_var, train, train);
  }
};

template <typename T>
struct ConvBn {
  Var<T> weight;
  BatchNorm2d<T> bn;
  std::size_t stride = 1, pad = 1;
  bool relu_after = true;

  ConvBn() = default;
  ConvBn(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, bool relu_, Rng& rng)
      : bn(out), stride(stride_), pad(k / 2), relu_after(relu_) {
    const T sd = std::sqrt(T{2} / T(in * k * k));
    weight = Var<T>(normal_tensor<T>({out, in, k, k}, T{0}, sd, rng), true);
  }

  Var<T> forward(const Var<T>& x, Mode mode) {
    Var<T> y = bn.forward(conv2d(x, weight, stride, pad), mode);
    return relu_after ? relu(y) : y;
  }
};

template <typename T>
struct BasicBlock {
  ConvBn<T> c1, c2;
  std::optional<ConvBn<T>> shortcut;

  BasicBlock() = default;
  BasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : c1(in, out, 3, stride, true, rng), c2(out, out, 3, 1, false, rng) {
    if (stride != 1 || in != out) shortcut.emplace(in, out, 1, stride, false, rng);
  }

  Var<T> forward(const Var<T>& x, Mode mode) {
    Var<T> y = c2.forward(c1.forward(x, mode), mode);
    return relu(add(y, shortcut ? shortcut->forward(x, mode) : x));
  }
};

template <typename T>
using Block = std::variant<ConvBn<T>, BasicBlock<T>>;

namespace detail {

/// Fixed per-channel affine map y = x * scale[c] + shift[c].
template <typename T>
Var<T> channel_affine(const Var<T>& x, const std::vector<T>& scale, const std::vector<T>& shift) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        out[idx] = x.value()[idx] * scale[ch] + shift[ch];
      }
  return make_result<T>(std::move(out), {x}, [n, c, hw, scale](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t idx = (b * c + ch) * hw + i;
          g[idx] += self.grad[idx] * scale[ch];
        }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct NamedParam {
  std::string name;
  Var<T>* var;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Four hookable stages, an optional HFDR block spliced after one of them,
/// then a tail (remaining layers, global pooling, linear classifier).
template <typename T>
class Model {
 public:
  struct Output {
    Var<T> logits;
    std::optional<HfdrOutput<T>> hfdr;
  };

  static Model build(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    Rng rng(seed);
    const std::size_t w = spec.width, cin = spec.input_shape[0];
    if (spec.arch == Arch::small_cnn) {
      m.stages_[0].push_back(ConvBn<T>(cin, w, 3, 1, true, rng));
      m.stages_[1].push_back(ConvBn<T>(w, 2 * w, 3, 2, true, rng));
      m.stages_[2].push_back(ConvBn<T>(2 * w, 4 * w, 3, 2, true, rng));
      m.stages_[3].push_back(ConvBn<T>(4 * w, 8 * w, 3, 2, true, rng));
    } else {
      m.stages_[0].push_back(ConvBn<T>(cin, w, 3, 1, true, rng));
      std::size_t in = w;
      for (std::size_t l = 0; l < 4; ++l) {
        const std::size_t out = w << l, stride = l == 0 ? 1 : 2;
        auto& dst = l < 3 ? m.stages_[l + 1] : m.tail_;
        dst.push_back(BasicBlock<T>(in, out, stride, rng));
        dst.push_back(BasicBlock<T>(out, out, 1, rng));
        in = out;
      }
    }
    const std::size_t feat = 8 * w;
    const T bound = T{1} / std::sqrt(T(feat));
    m.fc_w_ = Var<T>(uniform_tensor<T>({std::size_t(spec.num_classes), feat}, -bound, bound, rng), true);
    m.fc_b_ = Var<T>(uniform_tensor<T>({std::size_t(spec.num_classes)}, -bound, bound, rng), true);
    if (spec.hfdr_enabled)
      m.hfdr_ = HfdrParams<T>::init(m.stage_channels(spec.hfdr_position), rng, T(spec.tau));
    return m;
  }

  Model() = default;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Independent deep copy (parameters are not shared).
  Model clone() const {
    Model m = build(spec_, 0);
    m.load_state(state());
    return m;
  }

  const ModelSpec& spec() const { return spec_; }
  HfdrParams<T>* hfdr() { return hfdr_ ? &*hfdr_ : nullptr; }

  std::size_t stage_channels(StageId s) const {
    const auto i = std::size_t(s);
    if (spec_.arch == Arch::resnet18_thin) return i == 0 ? spec_.width : spec_.width << (i - 1);
    return spec_.width << i;
  }

  Output forward(const Var<T>& x, Mode mode, Rng* rng = nullptr) {
    check_input(x);
    Output out;
    Var<T> h = run_stages(prepare(x), 0, 4, mode, rng, out);
    out.logits = head(h, mode);
    return out;
  }

  Var<T> logits(const Var<T>& x, Mode mode, Rng* rng = nullptr) { return forward(x, mode, rng).logits; }

  /// Feature map passed on from `stage` (after the HFDR block if it sits there).
  Var<T> hook_feature(const Var<T>& x, StageId stage, Mode mode, Rng* rng = nullptr) {
    check_input(x);
    Output unused;
    return run_stages(prepare(x), 0, int(stage) + 1, mode, rng, unused);
  }

  /// Continues the forward pass from a feature map produced at `stage`.
  Output resume(const Var<T>& feature, StageId stage, Mode mode, Rng* rng = nullptr) {
    Output out;
    Var<T> h = run_stages(feature, int(stage) + 1, 4, mode, rng, out);
    out.logits = head(h, mode);
    return out;
  }

  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> ps;
    visit([&](const std::string& name, ConvBn<T>& l) {
      ps.push_back({name + ".weight", &l.weight});
      ps.push_back({name + ".bn.gamma", &l.bn.gamma});
      ps.push_back({name + ".bn.beta", &l.bn.beta});
    });
    if (hfdr_) {
      ps.push_back({"hfdr.align", &hfdr_->align});
      for (std::size_t i = 0; i < 3; ++i)
        ps.push_back({"hfdr.recal." + std::to_string(i), &hfdr_->recal.weights[i]});
    }
    ps.push_back({"fc.weight", &fc_w_});
    ps.push_back({"fc.bias", &fc_b_});
    return ps;
  }

  std::vector<NamedBuffer<T>> buffers() {
    std::vector<NamedBuffer<T>> bs;
    visit([&](const std::string& name, ConvBn<T>& l) {
      bs.push_back({name + ".bn.running_mean", &l.bn.running_mean});
      bs.push_back({name + ".bn.running_var", &l.bn.running_var});
    });
    return bs;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.var->size();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& p : parameters()) p.var->set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& p : parameters()) p.var->zero_grad();
  }

  /// Parameters and buffers by name.
  std::map<std::string, Tensor<T>> state() const {
    auto& self = const_cast<Model&>(*this);
    std::map<std::string, Tensor<T>> st;
    for (auto& p : self.parameters()) st[p.name] = p.var->value();
    for (auto& b : self.buffers()) st[b.name] = *b.tensor;
    return st;
  }

  /// Strict mode requires every tensor to be present; shapes always must match.
  void load_state(const std::map<std::string, Tensor<T>>& st, bool strict = true) {
    auto assign = [&](const std::string& name, Tensor<T>& dst) {
      auto it = st.find(name);
      if (it == st.end()) {
        if (strict) throw ArgumentError("state is missing tensor '" + name + "'");
        return;
      }
      if (it->second.shape() != dst.shape())
        throw ArgumentError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                            ", model expects " + shape_str(dst.shape()));
      dst = it->second;
    };
    for (auto& p : parameters()) assign(p.name, p.var->mutable_value());
    for (auto& b : buffers()) assign(b.name, *b.tensor);
  }

 private:
  template <typename Fn>
  void visit(Fn&& fn) {
    auto visit_blocks = [&](const std::string& prefix, std::vector<Block<T>>& blocks) {
      for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string name = prefix + "." + std::to_string(i);
        std::visit(
            [&](auto& b) {
              using B = std::decay_t<decltype(b)>;
              if constexpr (std::is_same_v<B, ConvBn<T>>) {
                fn(name, b);
              } else {
                fn(name + ".c1", b.c1);
                fn(name + ".c2", b.c2);
                if (b.shortcut) fn(name + ".shortcut", *b.shortcut);
              }
            },
            blocks[i]);
      }
    };
    for (std::size_t s = 0; s < 4; ++s) visit_blocks("stage" + std::to_string(s + 1), stages_[s]);
    visit_blocks("tail", tail_);
  }

  void check_input(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != spec_.input_shape[0] || s[2] != spec_.input_shape[1] ||
        s[3] != spec_.input_shape[2])
      throw ArgumentError("model input " + shape_str(s) + " does not match spec (N," +
                          std::to_string(spec_.input_shape[0]) + "," +
                          std::to_string(spec_.input_shape[1]) + "," +
                          std::to_string(spec_.input_shape[2]) + ")");
  }

  Var<T> prepare(const Var<T>& x) const {
    if (!spec_.normalize_input || x.dim(1) != 3) return x;
    static const std::vector<T> mean{T(0.4914), T(0.4822), T(0.4465)};
    static const std::vector<T> sd{T(0.2471), T(0.2435), T(0.2616)};
    std::vector<T> scale(3), shift(3);
    for (int c = 0; c < 3; ++c) {
      scale[c] = T{1} / sd[c];
      shift[c] = -mean[c] / sd[c];
    }
    return detail::channel_affine(x, scale, shift);
  }

  static Var<T> run_block(Block<T>& b, const Var<T>& x, Mode mode) {
    return std::visit([&](auto& blk) { return blk.forward(x, mode); }, b);
  }

  Var<T> run_stages(Var<T> h, int first, int last, Mode mode, Rng* rng, Output& out) {
    for (int s = first; s < last; ++s) {
      for (auto& b : stages_[s]) h = run_block(b, h, mode);
      if (hfdr_ && int(spec_.hfdr_position) == s) {
        HfdrParams<T> p = *hfdr_;
        p.noise_enabled = mode == Mode::train ? spec_.hfdr_train_noise : spec_.hfdr_eval_noise;
        out.hfdr = hfdr_forward(h, p, rng);
        h = out.hfdr->fused;
      }
    }
    return h;
  }

  Var<T> head(Var<T> h, Mode mode) {
    for (auto& b : tail_) h = run_block(b, h, mode);
    return linear(global_avg_pool(h), fc_w_, fc_b_);
  }

  ModelSpec spec_;
  std::array<std::vector<Block<T>>, 4> stages_;
  std::vector<Block<T>> tail_;
  Var<T> fc_w_, fc_b_;
  std::optional<HfdrParams<T>> hfdr_;
};

/// Disables parameter gradients for its lifetime (input-gradient passes).
template <typename T>
class FrozenParams {
 public:
  explicit FrozenParams(Model<T>& m) : m_(m) { m_.set_requires_grad(false); }
  ~FrozenParams() { m_.set_requires_grad(true); }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  Model<T>& m_;
};

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  return Model<T>::build(spec, seed);
}

}  // namespace hfdr
