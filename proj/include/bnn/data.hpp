#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bnn/tensor.hpp"

namespace bnn {

/// Image classification dataset: images n x c x h x w scaled to [0,1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;  // "train", "val" or "test"

  int64_t size() const { return images.size() == 0 ? 0 : images.dim(0); }
  std::vector<int64_t> sample_shape() const {
    return {images.dim(1), images.dim(2), images.dim(3)};
  }
};

/// Parses the IDX container (big-endian header, unsigned byte payload):
/// magic 0x00 0x00, type 0x08, dimension count, u32 dimension sizes, raw
/// pixels. Pixels are scaled to [0,1]; labels must match the image count.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Parses CIFAR-10 binary files: 3073-byte records, one label byte followed by
/// 3x32x32 channel-major pixels.
Dataset load_cifar10_bin(const std::vector<std::string>& paths);

/// Seeded shuffle, then split: first `fraction` of the permutation trains,
/// the rest validates. Disjoint and exhaustive.
std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, float fraction, Rng& rng);

struct AugmentConfig {
  float hflip_prob = 0.0f;       // off by default; digits flip meaningfully
  float max_rotation_deg = 15.0f;
  int crop_padding = 4;
};

/// The training augmentation pipeline, per image: horizontal flip with
/// probability hflip_prob, rotation by a uniform random angle with bilinear
/// resampling and zero fill, zero-pad by crop_padding and take a random crop
/// back to the original size. Output values stay in [0,1].
Tensor augment(const Tensor& batch, const AugmentConfig& cfg, Rng& rng);

/// Per-channel statistics of the training split, applied to batches after
/// augmentation.
struct Normalizer {
  std::vector<float> mean;
  std::vector<float> std;

  static Normalizer fit(const Dataset& train);
  Tensor apply(const Tensor& batch) const;
};

}  // namespace bnn
