#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advr/tensor.hpp"

namespace advr {

using ClassId = std::size_t;

// C x H x W image with every pixel in [0, 1].
class Image {
 public:
  Image() = default;
  // Throws DataError if any pixel is outside [0,1] or non-finite.
  explicit Image(Tensor pixels);
  Image(std::size_t channels, std::size_t height, std::size_t width, std::vector<double> pixels);

  // Clamps into [0,1] instead of validating; for attack outputs.
  static Image clamped(const Tensor& pixels);

  std::size_t channels() const { return pixels_.shape()[0]; }
  std::size_t height() const { return pixels_.shape()[1]; }
  std::size_t width() const { return pixels_.shape()[2]; }
  std::size_t size() const { return pixels_.size(); }
  const Shape& shape() const { return pixels_.shape(); }
  const Tensor& tensor() const { return pixels_; }
  std::span<const double> pixels() const { return pixels_.data(); }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  Tensor pixels_;
};

struct LabeledExample {
  Image image;
  ClassId label = 0;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

enum class Split : std::uint8_t { Train, Test, Validation };
const char* split_name(Split split);

class Dataset {
 public:
  // Throws DataError when empty, when image shapes differ, or when a label is
  // out of range.
  Dataset(std::vector<LabeledExample> examples, std::size_t class_count, Split split,
          std::vector<std::string> class_names = {});

  const std::vector<LabeledExample>& examples() const { return examples_; }
  std::size_t size() const { return examples_.size(); }
  std::size_t class_count() const { return class_count_; }
  Split split() const { return split_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const Shape& image_shape() const { return examples_.front().image.shape(); }
  const LabeledExample& operator[](std::size_t i) const { return examples_[i]; }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::vector<LabeledExample> examples_;
  std::size_t class_count_;
  Split split_;
  std::vector<std::string> class_names_;
};

// ---- CIFAR-10 binary version --------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

// Loads one batch file, or every batch for `split` when `path` is a directory
// (data_batch_*.bin for Train, test_batch.bin otherwise). Pixels are raw bytes
// divided by 255. Order is file order; the per-class cap keeps the first
// `max_per_class` records of each class.
Dataset load_cifar10(const std::filesystem::path& path, std::optional<std::size_t> max_per_class,
                     Split split = Split::Train);

// ---- Synthetic desk-scale data ------------------------------------------

// Texture knobs for the synthetic generator. Each class owns a fixed random
// +-1 "texture" pattern of small amplitude (one sign per texture_cell square
// block) spread over the whole image and a small
// high-contrast "mark" patch at a class-specific position. Each sample adds
// i.i.d. Gaussian pixel noise around a mid-grey background.
struct SynthTexture {
  double background = 0.5;
  double texture_amplitude = 0.03;
  std::size_t texture_cell = 4;
  double mark_amplitude = 0.25;
  std::size_t mark_size = 2;
  double noise_stddev = 0.1;
};

// Pure function of its arguments. Examples are emitted round-robin over
// classes (sample 0 of every class, then sample 1, ...).
Dataset synth_dataset(std::uint64_t seed, std::size_t class_count, std::size_t per_class,
                      const Shape& image_shape, const SynthTexture& texture = {});

// Splits by per-class position: the first `first_per_class` examples of each
// class go to the first dataset, the rest to the second.
std::pair<Dataset, Dataset> split_per_class(const Dataset& data, std::size_t first_per_class,
                                            Split first_split, Split second_split);

// Deterministic Fisher-Yates shuffle of the example order.
Dataset shuffled(const Dataset& data, std::uint64_t seed);

// Packed dataset file ("ADVRDSET"): lossless 64-bit pixels and labels.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace advr
