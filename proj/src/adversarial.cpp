#include "advr/adversarial.hpp"

#include <fstream>

#include "advr/binio.hpp"
#include "advr/errors.hpp"

namespace advr {

namespace {
constexpr std::string_view kMagic = "ADVRADVS";
constexpr std::uint32_t kVersion = 1;
}  // namespace

AdversarialExample make_adversarial(Image original, Image adversarial, ClassId true_label,
                                    ClassId clean_prediction, ClassId adv_prediction,
                                    std::string attack_name, std::uint32_t iterations) {
  if (original.shape() != adversarial.shape()) {
    throw ShapeError("adversarial image shape " + shape_str(adversarial.shape()) +
                     " differs from original " + shape_str(original.shape()));
  }
  AdversarialExample ex;
  const Tensor diff = adversarial.tensor() - original.tensor();
  ex.l2_distance = l2_norm(diff.data());
  ex.linf_distance = linf_norm(diff.data());
  ex.original = std::move(original);
  ex.adversarial = std::move(adversarial);
  ex.true_label = true_label;
  ex.clean_prediction = clean_prediction;
  ex.adv_prediction = adv_prediction;
  ex.attack_name = std::move(attack_name);
  ex.success = adv_prediction != true_label;
  ex.iterations = iterations;
  return ex;
}

void save_adv_set(const std::filesystem::path& path, const AdversarialSet& set) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  binio::Writer w(out);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u64(set.size());
  Shape shape = set.empty() ? Shape{0, 0, 0} : set.front().original.shape();
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (const auto& ex : set) {
    if (ex.original.shape() != shape || ex.adversarial.shape() != shape) {
      throw ShapeError("save_adv_set: all records must share shape " + shape_str(shape));
    }
    w.str(ex.attack_name);
    w.u64(ex.true_label);
    w.u64(ex.clean_prediction);
    w.u64(ex.adv_prediction);
    w.f64(ex.l2_distance);
    w.f64(ex.linf_distance);
    w.u8(ex.success ? 1 : 0);
    w.u32(ex.iterations);
    w.f64s(ex.original.pixels());
    w.f64s(ex.adversarial.pixels());
  }
}

AdversarialSet load_adv_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  binio::Reader r(in, path.string());
  r.expect_magic(kMagic);
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw DataError(path.string() + ": adversarial-set version " + std::to_string(version) +
                    " is not supported (expected " + std::to_string(kVersion) + ")");
  }
  const std::uint64_t count = r.u64();
  Shape shape(3);
  for (auto& d : shape) d = r.u32();
  if (count > 0 && shape_size(shape) == 0) throw DataError(path.string() + ": zero image shape");
  if (count > (std::uint64_t{1} << 24)) throw DataError(path.string() + ": record count too large");
  AdversarialSet set;
  set.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    AdversarialExample ex;
    ex.attack_name = r.str();
    ex.true_label = r.u64();
    ex.clean_prediction = r.u64();
    ex.adv_prediction = r.u64();
    ex.l2_distance = r.f64();
    ex.linf_distance = r.f64();
    ex.success = r.u8() != 0;
    ex.iterations = r.u32();
    Tensor orig(shape), adv(shape);
    r.f64s(orig.data());
    r.f64s(adv.data());
    ex.original = Image(std::move(orig));
    ex.adversarial = Image(std::move(adv));
    set.push_back(std::move(ex));
  }
  r.expect_end();
  return set;
}

Dataset adversarial_dataset(const AdversarialSet& set, std::size_t class_count, Split split) {
  std::vector<LabeledExample> ex;
  ex.reserve(set.size());
  for (const auto& a : set) ex.push_back({a.adversarial, a.true_label});
  return Dataset(std::move(ex), class_count, split);
}

}  // namespace advr
