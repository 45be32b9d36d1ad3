#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "hfdr/tensor.hpp"

namespace hfdr {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Images N x C x H x W in [0,1] with integer labels in [0, num_classes).
template <typename T>
struct Dataset {
  Tensor<T> images;
  std::vector<int> labels;
  int num_classes = 10;
  std::string name;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  void validate() const {
    require_rank4(images, "dataset images");
    if (images.dim(0) != labels.size())
      throw ArgumentError("dataset: " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || y >= num_classes) throw ArgumentError("dataset: label " + std::to_string(y) + " out of range");
    for (auto v : images.values())
      if (!(v >= T{0} && v <= T{1})) throw ArgumentError("dataset: pixel outside [0,1]");
  }

  /// Images at the given indices, in order.
  Tensor<T> batch_images(const std::vector<std::size_t>& idx) const {
    const std::size_t per = images.size() / std::max<std::size_t>(1, images.dim(0));
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor<T> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
    return out;
  }

  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
  }

  Dataset select(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.images = batch_images(idx);
    d.labels = batch_labels(idx);
    d.num_classes = num_classes;
    d.name = name;
    d.split = split;
    return d;
  }
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary records: 1 label byte + 3072 bytes (R, G, B planes, row-major)

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr std::size_t kCifarBatchRecords = 10000;

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

/// Parses a file of whole records. `expected_records` = 0 accepts any count.
template <typename T>
Dataset<T> read_cifar_records(const std::filesystem::path& path, std::size_t expected_records = 0) {
  const auto bytes = read_bytes(path);
  if (expected_records != 0 && bytes.size() != expected_records * kCifarRecord)
    throw FormatError(path.string() + ": " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected_records * kCifarRecord));
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw FormatError(path.string() + ": " + std::to_string(bytes.size()) +
                      " bytes is not a positive multiple of the " + std::to_string(kCifarRecord) +
                      "-byte record size");
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset<T> ds;
  ds.name = path.filename().string();
  ds.images = Tensor<T>({n, 3, kCifarSide, kCifarSide});
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= 10) throw FormatError(path.string() + ": record " + std::to_string(r) + " has label " +
                                        std::to_string(int(rec[0])));
    ds.labels[r] = rec[0];
    T* dst = ds.images.data() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i) dst[i] = T(rec[1 + i]) / T{255};
  }
  return ds;
}

/// Inverse of read_cifar_records; pixels are rounded to the nearest byte.
template <typename T>
void write_cifar_records(const std::filesystem::path& path, const Dataset<T>& ds) {
  if (ds.image_shape() != Shape{3, kCifarSide, kCifarSide})
    throw ArgumentError("write_cifar_records: images must be 3x32x32, got " + shape_str(ds.image_shape()));
  std::vector<unsigned char> bytes(ds.size() * kCifarRecord);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    unsigned char* rec = bytes.data() + r * kCifarRecord;
    rec[0] = static_cast<unsigned char>(ds.labels[r]);
    const T* src = ds.images.data() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i)
      rec[1 + i] = static_cast<unsigned char>(std::lround(std::clamp(double(src[i]), 0.0, 1.0) * 255.0));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
Dataset<T> concat(std::vector<Dataset<T>> parts) {
  if (parts.empty()) throw ArgumentError("concat: no datasets");
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape s = parts.front().images.shape();
  s[0] = n;
  Dataset<T> out;
  out.images = Tensor<T>(s);
  out.num_classes = parts.front().num_classes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.images.values().begin(), p.images.values().end(), out.images.data() + off);
    off += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

/// Canonical binary distribution: data_batch_{1..5}.bin and test_batch.bin,
/// 10000 records each.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_cifar10(const std::filesystem::path& dir) {
  std::vector<Dataset<T>> parts;
  for (int i = 1; i <= 5; ++i)
    parts.push_back(read_cifar_records<T>(dir / ("data_batch_" + std::to_string(i) + ".bin"), kCifarBatchRecords));
  Dataset<T> train = concat(std::move(parts));
  Dataset<T> test = read_cifar_records<T>(dir / "test_batch.bin", kCifarBatchRecords);
  train.name = test.name = "cifar10";
  train.split = "train";
  test.split = "test";
  return {std::move(train), std::move(test)};
}

/// Class-balanced subset: per class, the first `per_class` indices of a
/// seeded shuffle, returned in ascending index order. Subsets drawn with
/// different seeds may overlap.
template <typename T>
Dataset<T> subset(const Dataset<T>& ds, std::size_t per_class, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(std::size_t(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[std::size_t(ds.labels[i])].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < per_class)
      throw ArgumentError("subset: class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                          " examples, " + std::to_string(per_class) + " requested");
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + long(per_class));
  }
  std::sort(keep.begin(), keep.end());
  Dataset<T> out = ds.select(keep);
  out.name = ds.name + "-subset";
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class FlipPolicy { random, always, never };

struct AugmentOptions {
  std::size_t pad = 4;
  bool crop = true;
  FlipPolicy flip = FlipPolicy::random;
};

template <typename T>
void hflip_image(T* img, std::size_t c, std::size_t h, std::size_t w) {
  for (std::size_t p = 0; p < c * h; ++p) std::reverse(img + p * w, img + (p + 1) * w);
}

/// Random zero-pad crop and horizontal flip per image.
template <typename T>
Tensor<T> augment(const Tensor<T>& batch, Rng& rng, const AugmentOptions& opt = {}) {
  require_rank4(batch, "augment");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t per = c * h * w;
  Tensor<T> out(batch.shape());
  std::uniform_int_distribution<int> shift(0, int(2 * opt.pad));
  std::bernoulli_distribution coin(0.5);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = batch.data() + b * per;
    T* dst = out.data() + b * per;
    long dy = 0, dx = 0;
    if (opt.crop && opt.pad > 0) {
      dy = shift(rng) - long(opt.pad);
      dx = shift(rng) - long(opt.pad);
    }
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = long(y) + dy, sx = long(x) + dx;
          dst[(ch * h + y) * w + x] = (sy < 0 || sy >= long(h) || sx < 0 || sx >= long(w))
                                          ? T{0}
                                          : src[(ch * h + std::size_t(sy)) * w + std::size_t(sx)];
        }
    const bool flip = opt.flip == FlipPolicy::always || (opt.flip == FlipPolicy::random && coin(rng));
    if (flip) hflip_image(dst, c, h, w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic two-class frequency dataset

/// Class 0: smooth linear ramps. Class 1: a dot lattice of period 2 pixels
/// with random phase, whose energy sits at the Nyquist frequencies. Both get
/// small Gaussian noise. Labels alternate 0, 1, 0, 1, ...
template <typename T>
Dataset<T> synth_freq_dataset(std::size_t n_per_class, std::size_t size, std::uint64_t seed,
                              std::size_t channels = 3) {
  if (size < 8) throw ArgumentError("synth_freq_dataset: size must be >= 8");
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);
  const std::size_t n = 2 * n_per_class, plane = size * size;
  Dataset<T> ds;
  ds.name = "synth-freq";
  ds.split = "train";
  ds.num_classes = 2;
  ds.images = Tensor<T>({n, channels, size, size});
  ds.labels.resize(n);
  const double span = double(size - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = int(i % 2);
    ds.labels[i] = label;
    T* img = ds.images.data() + i * channels * plane;
    if (label == 0) {
      const double base = 0.3 + 0.4 * u01(rng);
      const double gx = 0.6 * u01(rng) - 0.3, gy = 0.6 * u01(rng) - 0.3;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double v = base + gx * (double(x) / span - 0.5) + gy * (double(y) / span - 0.5);
          for (std::size_t c = 0; c < channels; ++c) img[c * plane + y * size + x] = T(v);
        }
    } else {
      const double bg = 0.05 * u01(rng), dot = 0.8 + 0.2 * u01(rng);
      const std::size_t py = rng() % 2, px = rng() % 2;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double v = (y % 2 == py && x % 2 == px) ? dot : bg;
          for (std::size_t c = 0; c < channels; ++c) img[c * plane + y * size + x] = T(v);
        }
    }
    for (std::size_t k = 0; k < channels * plane; ++k)
      img[k] = T(std::clamp(double(img[k]) + noise(rng), 0.0, 1.0));
  }
  return ds;
}

}  // namespace hfdr
