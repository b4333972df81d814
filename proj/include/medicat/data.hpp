#pragma once

// Dataset container, normalisation/resizing, batching and the synthetic
// stand-in dataset.
//
// On-disk layout of a dataset directory:
//   meta.json            {"name", "num_classes", "shape": [H, W, C],
//                         "counts": {"train", "val", "test"},
//                         optional "mean": [..C], "std": [..C]}
//   <split>_images.bin   raw u8, example-major, H*W*C bytes per example (HWC)
//   <split>_labels.bin   one u8 per example

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medicat/tensor.hpp"

namespace medicat {

enum class Split { train, val, test };

std::string_view split_name(Split split);
// Accepts "train", "val"/"validation", "test".
Split parse_split(std::string_view name);

struct SplitData {
  std::vector<std::uint8_t> images;  // count * H * W * C, HWC per example
  std::vector<std::uint8_t> labels;

  std::size_t count() const { return labels.size(); }
};

struct Dataset {
  std::string name;
  std::size_t num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> mean;  // per channel, in [0, 1] pixel units
  std::vector<double> std;
  SplitData train, val, test;

  const SplitData& split(Split s) const;
  SplitData& split(Split s);
  std::size_t image_bytes() const { return height * width * channels; }

  // Throws DataError on a broken invariant (label >= C, size mismatch).
  void validate() const;
};

// Reads and validates a dataset directory. Throws DataError; nothing is
// returned unless every file checks out.
Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

// (x / 255 - mean[c]) / std[c] for `count` HWC images; output is CHW per image.
std::vector<double> normalize(std::span<const std::uint8_t> pixels, std::size_t count,
                              std::size_t height, std::size_t width, std::size_t channels,
                              std::span<const double> mean, std::span<const double> std);
// Inverse of normalize, back to HWC pixel units (reals in [0, 255]).
std::vector<double> denormalize(std::span<const double> chw, std::size_t count,
                                std::size_t height, std::size_t width, std::size_t channels,
                                std::span<const double> mean, std::span<const double> std);

// Bilinear resize of one CHW image from (height x width) to (target x target),
// half-pixel sample centres with edge clamping.
std::vector<double> resize(std::span<const double> chw, std::size_t channels,
                           std::size_t height, std::size_t width, std::size_t target_side);

// A split normalised (and resized, if needed) once, ready for batching.
struct PreparedSplit {
  std::size_t count = 0;
  std::size_t channels = 0;
  std::size_t side = 0;
  std::vector<double> pixels;  // CHW per example
  std::vector<int> labels;

  std::size_t image_size() const { return channels * side * side; }
};

PreparedSplit prepare_split(const Dataset& dataset, Split split, std::size_t target_side);

template <typename Real>
struct Batch {
  Tensor<Real> images;  // [b x C x H x W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

template <typename Real>
Batch<Real> make_batch(const PreparedSplit& split, std::span<const std::size_t> indices);

// Consecutive chunks of a (seeded, optionally shuffled) permutation of [0, count).
std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed, bool shuffle);

template <typename Real>
std::vector<Batch<Real>> batch_iter(const PreparedSplit& split, std::size_t batch_size,
                                    std::uint64_t seed, bool shuffle);

struct SynthConfig {
  std::size_t num_classes = 4;
  std::size_t per_class = 500;
  std::size_t image_side = 28;
  std::size_t channels = 1;
  std::uint64_t seed = 42;
  std::string name = "synthetic";
};

// Class k brightens the k-th block of a ceil(sqrt(C)) x ceil(sqrt(C)) grid
// over seeded background noise. Each class is split 70/10/20 into
// train/val/test, so every split is balanced.
Dataset synth_generate(const SynthConfig& cfg);

}  // namespace medicat
