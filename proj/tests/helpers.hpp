#pragma once

#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hfdr/hfdr.hpp"

namespace testing_util {

inline std::vector<double> to_double(const hfdr::Tensor<float>& t) { return {t.values().begin(), t.values().end()}; }
inline std::vector<double> to_double(const hfdr::Tensor<double>& t) { return t.storage(); }

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hfdr-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Small spec for fast tests: 3 x size x size inputs, 2 classes.
inline hfdr::ModelSpec tiny_spec(std::size_t size = 8, std::size_t width = 4, bool hfdr_on = false) {
  hfdr::ModelSpec s;
  s.num_classes = 2;
  s.input_shape = {3, size, size};
  s.width = width;
  s.hfdr_enabled = hfdr_on;
  return s;
}

/// Clean-trains a tiny small_cnn on the synthetic set; used where a model
/// with non-trivial accuracy is needed.
template <typename T>
hfdr::Model<T> trained_toy(const hfdr::Dataset<T>& data, std::uint64_t seed, bool hfdr_on = false, int epochs = 3) {
  auto model = hfdr::build_model<T>(tiny_spec(data.images.dim(2), 4, hfdr_on), seed);
  hfdr::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.lr_milestones = {};
  cfg.augment = false;
  cfg.attack.epsilon = 0.0;
  cfg.loss.lambda_far = 0.0;
  hfdr::SgdState<T> opt;
  hfdr::Rng rng(seed);
  hfdr::fit(model, data, cfg, opt, rng);
  return model;
}

}  // namespace testing_util
