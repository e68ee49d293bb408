#pragma once

// Dataset ingestion: IDX container files (big-endian, the MNIST family
// layout) and seeded synthetic class-conditional Gaussian blobs for
// desk-scale runs.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "bnas/tensor.hpp"

namespace bnas {

struct Dataset {
  int channels = 1, height = 0, width = 0, num_classes = 0;
  std::vector<float> images;  // size * channels * height * width
  std::vector<int> labels;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t sample_numel() const { return static_cast<int64_t>(channels) * height * width; }
};

inline Tensor batch_images(const Dataset& d, const std::vector<int64_t>& idx) {
  const int64_t sn = d.sample_numel();
  Tensor out(Shape{static_cast<int64_t>(idx.size()), d.channels, d.height, d.width});
  float* op = out.values().data();
  for (size_t b = 0; b < idx.size(); ++b)
    std::copy(d.images.data() + idx[b] * sn, d.images.data() + (idx[b] + 1) * sn, op + static_cast<int64_t>(b) * sn);
  return out;
}

inline std::vector<int> batch_labels(const Dataset& d, const std::vector<int64_t>& idx) {
  std::vector<int> out(idx.size());
  for (size_t b = 0; b < idx.size(); ++b) out[b] = d.labels[static_cast<size_t>(idx[b])];
  return out;
}

inline std::vector<int64_t> shuffled_indices(int64_t n, std::mt19937& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

// Class-conditional blobs: each class owns a fixed +-contrast pixel pattern
// around 0.5, samples add Gaussian noise. The separable preset keeps noise
// low enough that a nearest-centroid classifier exceeds 99% accuracy.
struct SynthSpec {
  int classes = 4;
  int per_class = 64;
  int image_size = 8;
  int channels = 1;
  float contrast = 0.45f;
  float noise = 0.6f;

  static SynthSpec separable(int classes = 4, int per_class = 64, int image_size = 8) {
    SynthSpec s;
    s.classes = classes;
    s.per_class = per_class;
    s.image_size = image_size;
    s.noise = 0.25f;
    return s;
  }
};

// Deterministic under (spec, seed, part). Class centroids depend only on the
// seed while samples depend on (seed, part), so part=0 (train) and part=1
// (test) share the same class geometry but draw disjoint noise.
inline Dataset synth_dataset(const SynthSpec& spec, uint32_t seed, uint32_t part = 0) {
  if (spec.classes < 2) throw value_error("synth_dataset: need at least 2 classes");
  if (spec.per_class < 1 || spec.image_size < 1 || spec.channels < 1)
    throw value_error("synth_dataset: per_class, image_size and channels must be >= 1");

  Dataset d;
  d.channels = spec.channels;
  d.height = d.width = spec.image_size;
  d.num_classes = spec.classes;
  const int64_t sn = d.sample_numel();

  std::mt19937 crng(mix_seed(seed, seed_stream::kData, 0));
  std::vector<float> centroids(static_cast<size_t>(spec.classes * sn));
  std::uniform_int_distribution<int> coin(0, 1);
  for (float& v : centroids) v = 0.5f + (coin(crng) ? spec.contrast : -spec.contrast);

  std::mt19937 srng(mix_seed(seed, seed_stream::kData, 1 + part));
  std::normal_distribution<float> gauss(0.f, spec.noise);
  d.images.resize(static_cast<size_t>(spec.classes) * spec.per_class * sn);
  d.labels.resize(static_cast<size_t>(spec.classes) * spec.per_class);
  int64_t s = 0;
  for (int k = 0; k < spec.classes; ++k)
    for (int j = 0; j < spec.per_class; ++j, ++s) {
      d.labels[static_cast<size_t>(s)] = k;
      const float* cen = centroids.data() + static_cast<int64_t>(k) * sn;
      float* img = d.images.data() + s * sn;
      for (int64_t i = 0; i < sn; ++i) img[i] = cen[i] + gauss(srng);
    }
  return d;
}

namespace detail {

inline uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw data_error(path + ": truncated header");
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

inline void write_be32(std::ofstream& f, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline constexpr uint32_t kIdxImageMagic = 0x00000803;
inline constexpr uint32_t kIdxLabelMagic = 0x00000801;

// Parses the big-endian IDX pair (images + labels). Pixels scale to [0, 1];
// labels must cover [0, max] densely so num_classes is well defined.
inline Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw data_error(images_path + ": cannot open");
  if (const uint32_t magic = detail::read_be32(fi, images_path); magic != kIdxImageMagic)
    throw data_error(images_path + ": bad image magic " + std::to_string(magic));
  const uint32_t count = detail::read_be32(fi, images_path);
  const uint32_t rows = detail::read_be32(fi, images_path);
  const uint32_t cols = detail::read_be32(fi, images_path);
  if (rows == 0 || cols == 0 || count == 0) throw data_error(images_path + ": empty dimensions");
  std::vector<unsigned char> pixels(static_cast<size_t>(count) * rows * cols);
  if (!fi.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
    throw data_error(images_path + ": truncated pixel data");

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw data_error(labels_path + ": cannot open");
  if (const uint32_t magic = detail::read_be32(fl, labels_path); magic != kIdxLabelMagic)
    throw data_error(labels_path + ": bad label magic " + std::to_string(magic));
  const uint32_t lcount = detail::read_be32(fl, labels_path);
  if (lcount != count)
    throw data_error(labels_path + ": " + std::to_string(lcount) + " labels for " + std::to_string(count) +
                     " images");
  std::vector<unsigned char> raw(lcount);
  if (!fl.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw data_error(labels_path + ": truncated label data");

  Dataset d;
  d.channels = 1;
  d.height = static_cast<int>(rows);
  d.width = static_cast<int>(cols);
  d.images.resize(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) d.images[i] = static_cast<float>(pixels[i]) / 255.f;
  d.labels.assign(raw.begin(), raw.end());

  const int max_label = *std::max_element(d.labels.begin(), d.labels.end());
  std::vector<int64_t> per_class(static_cast<size_t>(max_label) + 1, 0);
  for (int l : d.labels) ++per_class[static_cast<size_t>(l)];
  for (int k = 0; k <= max_label; ++k)
    if (per_class[static_cast<size_t>(k)] == 0)
      throw data_error(labels_path + ": class " + std::to_string(k) + " absent, labels not dense");
  d.num_classes = max_label + 1;
  return d;
}

// Writes the matching IDX pair (used by fixtures and format round-trips).
// Pixels are quantized back to bytes, so exact round-trips need /255 values.
inline void save_idx_dataset(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  if (d.channels != 1) throw data_error("save_idx_dataset: IDX stores single-channel images");
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw data_error(images_path + ": cannot open for writing");
  detail::write_be32(fi, kIdxImageMagic);
  detail::write_be32(fi, static_cast<uint32_t>(d.size()));
  detail::write_be32(fi, static_cast<uint32_t>(d.height));
  detail::write_be32(fi, static_cast<uint32_t>(d.width));
  for (float v : d.images) {
    const float clamped = std::min(1.f, std::max(0.f, v));
    const unsigned char b = static_cast<unsigned char>(clamped * 255.f + 0.5f);
    fi.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw data_error(labels_path + ": cannot open for writing");
  detail::write_be32(fl, kIdxLabelMagic);
  detail::write_be32(fl, static_cast<uint32_t>(d.size()));
  for (int l : d.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    fl.write(reinterpret_cast<const char*>(&b), 1);
  }
}

// Disjoint halves (sizes n/2 rounded up then down), deterministic under seed.
inline std::pair<Dataset, Dataset> split_train_val(const Dataset& d, uint32_t seed) {
  if (d.size() < 2) throw value_error("split_train_val: need at least 2 samples");
  std::mt19937 rng(mix_seed(seed, seed_stream::kSplit));
  const std::vector<int64_t> idx = shuffled_indices(d.size(), rng);
  const int64_t half = (d.size() + 1) / 2;
  auto take = [&](int64_t lo, int64_t hi) {
    Dataset out;
    out.channels = d.channels;
    out.height = d.height;
    out.width = d.width;
    out.num_classes = d.num_classes;
    const int64_t sn = d.sample_numel();
    out.images.resize(static_cast<size_t>((hi - lo) * sn));
    out.labels.resize(static_cast<size_t>(hi - lo));
    for (int64_t i = lo; i < hi; ++i) {
      std::copy(d.images.data() + idx[static_cast<size_t>(i)] * sn,
                d.images.data() + (idx[static_cast<size_t>(i)] + 1) * sn,
                out.images.data() + (i - lo) * sn);
      out.labels[static_cast<size_t>(i - lo)] = d.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    }
    return out;
  };
  return {take(0, half), take(half, d.size())};
}

}  // namespace bnas
