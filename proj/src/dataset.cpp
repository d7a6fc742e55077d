#include "advr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "advr/binio.hpp"
#include "advr/errors.hpp"

namespace advr {

namespace fs = std::filesystem;

Image::Image(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.shape().size() != 3 || pixels_.size() == 0) {
    throw ShapeError("image tensor must be [C,H,W], got " + shape_str(pixels_.shape()));
  }
  for (std::size_t i = 0; i < pixels_.size(); ++i) {
    const double v = pixels_[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("pixel " + std::to_string(i) + " = " + std::to_string(v) + " outside [0,1]");
    }
  }
}

Image::Image(std::size_t channels, std::size_t height, std::size_t width, std::vector<double> pixels)
    : Image(Tensor({channels, height, width}, std::move(pixels))) {}

Image Image::clamped(const Tensor& pixels) { return Image(clip(pixels, 0.0, 1.0)); }

const char* split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Validation: return "validation";
  }
  return "?";
}

Dataset::Dataset(std::vector<LabeledExample> examples, std::size_t class_count, Split split,
                 std::vector<std::string> class_names)
    : examples_(std::move(examples)),
      class_count_(class_count),
      split_(split),
      class_names_(std::move(class_names)) {
  if (examples_.empty()) throw DataError("dataset is empty");
  if (class_count_ == 0) throw DataError("dataset class count must be positive");
  if (!class_names_.empty() && class_names_.size() != class_count_) {
    throw DataError("dataset has " + std::to_string(class_names_.size()) + " class names for " +
                    std::to_string(class_count_) + " classes");
  }
  const Shape& shape = examples_.front().image.shape();
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    if (examples_[i].image.shape() != shape) {
      throw DataError("example " + std::to_string(i) + " has shape " +
                      shape_str(examples_[i].image.shape()) + ", expected " + shape_str(shape));
    }
    if (examples_[i].label >= class_count_) {
      throw DataError("example " + std::to_string(i) + " label " + std::to_string(examples_[i].label) +
                      " >= class count " + std::to_string(class_count_));
    }
  }
}

// ---- CIFAR-10 ------------------------------------------------------------

namespace {

const std::vector<std::string> kCifarNames = {"airplane", "automobile", "bird", "cat", "deer",
                                              "dog",      "frog",       "horse", "ship", "truck"};

std::vector<fs::path> cifar_files(const fs::path& path, Split split) {
  if (!fs::exists(path)) throw DataError("CIFAR-10 path does not exist: " + path.string());
  if (!fs::is_directory(path)) return {path};
  std::vector<fs::path> files;
  if (split == Split::Train) {
    for (int i = 1; i <= 5; ++i) {
      fs::path f = path / ("data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(f)) files.push_back(f);
    }
  } else {
    fs::path f = path / "test_batch.bin";
    if (fs::exists(f)) files.push_back(f);
  }
  if (files.empty()) {
    throw DataError("no CIFAR-10 " + std::string(split_name(split)) + " batch files in " + path.string());
  }
  return files;
}

}  // namespace

Dataset load_cifar10(const fs::path& path, std::optional<std::size_t> max_per_class, Split split) {
  if (max_per_class && *max_per_class == 0) throw InvalidArgument("max_per_class must be positive");
  std::vector<LabeledExample> examples;
  std::vector<std::size_t> taken(10, 0);
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (const fs::path& file : cifar_files(path, split)) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    const auto bytes = static_cast<std::uint64_t>(fs::file_size(file));
    if (bytes % kCifarRecordBytes != 0) {
      throw DataError(file.string() + ": malformed record at byte offset " +
                      std::to_string(bytes - bytes % kCifarRecordBytes) + " (file length " +
                      std::to_string(bytes) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes) + ")");
    }
    for (std::uint64_t offset = 0; offset < bytes; offset += kCifarRecordBytes) {
      in.read(reinterpret_cast<char*>(record.data()), std::streamsize(kCifarRecordBytes));
      if (!in) throw DataError(file.string() + ": read failed at byte offset " + std::to_string(offset));
      const ClassId label = record[0];
      if (label >= 10) {
        throw DataError(file.string() + ": label " + std::to_string(label) + " at byte offset " +
                        std::to_string(offset));
      }
      if (max_per_class && taken[label] >= *max_per_class) continue;
      ++taken[label];
      std::vector<double> px(kCifarRecordBytes - 1);
      for (std::size_t i = 0; i < px.size(); ++i) px[i] = record[i + 1] / 255.0;
      examples.push_back({Image(3, 32, 32, std::move(px)), label});
    }
  }
  return Dataset(std::move(examples), 10, split, kCifarNames);
}

// ---- Synthetic ------------------------------------------------------------

Dataset synth_dataset(std::uint64_t seed, std::size_t class_count, std::size_t per_class,
                      const Shape& image_shape, const SynthTexture& texture) {
  if (class_count < 2) throw InvalidArgument("synth_dataset: class_count must be >= 2");
  if (per_class < 2) throw InvalidArgument("synth_dataset: per_class must be >= 2");
  if (image_shape.size() != 3 || shape_size(image_shape) == 0) {
    throw ShapeError("synth_dataset: image shape must be [C,H,W], got " + shape_str(image_shape));
  }
  const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
  const std::size_t m = texture.mark_size;
  if (texture.texture_cell == 0) throw InvalidArgument("synth_dataset: texture_cell must be >= 1");
  if (m == 0 || m > h || m > w) throw InvalidArgument("synth_dataset: mark size does not fit the image");
  const std::size_t cells_y = h / m, cells_x = w / m;
  if (cells_y * cells_x < class_count) {
    throw InvalidArgument("synth_dataset: image too small for one mark cell per class");
  }

  std::mt19937_64 rng(seed);
  const std::size_t n = shape_size(image_shape);

  // Class templates: texture sign pattern plus a mark cell per class.
  std::vector<std::vector<double>> templates(class_count, std::vector<double>(n, texture.background));
  std::vector<std::size_t> cells(cells_y * cells_x);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  std::shuffle(cells.begin(), cells.end(), rng);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < class_count; ++k) {
    auto& t = templates[k];
    // One random sign per texture_cell x texture_cell block.
    const std::size_t tc = texture.texture_cell;
    const std::size_t by = (h + tc - 1) / tc, bx = (w + tc - 1) / tc;
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::vector<double> signs(by * bx);
      for (double& sgn : signs) sgn = coin(rng) ? 1.0 : -1.0;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          t[(ch * h + y) * w + x] += texture.texture_amplitude * signs[(y / tc) * bx + x / tc];
        }
      }
    }
    const std::size_t cy = cells[k] / cells_x, cx = cells[k] % cells_x;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = cy * m; y < (cy + 1) * m; ++y) {
        for (std::size_t x = cx * m; x < (cx + 1) * m; ++x) {
          t[(ch * h + y) * w + x] += texture.mark_amplitude;
        }
      }
    }
  }

  std::normal_distribution<double> noise(0.0, texture.noise_stddev);
  std::vector<LabeledExample> examples;
  examples.reserve(class_count * per_class);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t k = 0; k < class_count; ++k) {
      std::vector<double> px(templates[k]);
      for (double& v : px) v = std::clamp(v + noise(rng), 0.0, 1.0);
      examples.push_back({Image(Tensor(image_shape, std::move(px))), k});
    }
  }
  return Dataset(std::move(examples), class_count, Split::Train);
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& data, std::size_t first_per_class,
                                            Split first_split, Split second_split) {
  std::vector<LabeledExample> first, second;
  std::vector<std::size_t> seen(data.class_count(), 0);
  for (const auto& ex : data.examples()) {
    if (seen[ex.label]++ < first_per_class) {
      first.push_back(ex);
    } else {
      second.push_back(ex);
    }
  }
  return {Dataset(std::move(first), data.class_count(), first_split, data.class_names()),
          Dataset(std::move(second), data.class_count(), second_split, data.class_names())};
}

Dataset shuffled(const Dataset& data, std::uint64_t seed) {
  std::vector<LabeledExample> ex = data.examples();
  std::mt19937_64 rng(seed);
  for (std::size_t i = ex.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(ex[i - 1], ex[pick(rng)]);
  }
  return Dataset(std::move(ex), data.class_count(), data.split(), data.class_names());
}

// ---- Dataset file ---------------------------------------------------------

namespace {
constexpr std::string_view kDatasetMagic = "ADVRDSET";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const fs::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  binio::Writer w(out);
  w.magic(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u8(static_cast<std::uint8_t>(data.split()));
  w.u64(data.class_count());
  w.u32(static_cast<std::uint32_t>(data.class_names().size()));
  for (const auto& name : data.class_names()) w.str(name);
  const Shape& shape = data.image_shape();
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.u64(data.size());
  for (const auto& ex : data.examples()) {
    w.u64(ex.label);
    w.f64s(ex.image.pixels());
  }
}

Dataset load_dataset(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  binio::Reader r(in, path.string());
  r.expect_magic(kDatasetMagic);
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw DataError(path.string() + ": unsupported dataset version " + std::to_string(version));
  }
  const auto split = static_cast<Split>(r.u8());
  const std::uint64_t class_count = r.u64();
  std::vector<std::string> names(r.u32());
  for (auto& name : names) name = r.str();
  Shape shape(3);
  for (auto& d : shape) d = r.u32();
  const std::uint64_t count = r.u64();
  if (count > (std::uint64_t{1} << 26)) throw DataError(path.string() + ": example count too large");
  std::vector<LabeledExample> examples;
  examples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t label = r.u64();
    Tensor px(shape);
    r.f64s(px.data());
    examples.push_back({Image(std::move(px)), label});
  }
  r.expect_end();
  return Dataset(std::move(examples), class_count, split, std::move(names));
}

}  // namespace advr
