#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advr/dataset.hpp"

namespace advr {

// Paired original/perturbed image as produced by any attack.
struct AdversarialExample {
  Image original;
  Image adversarial;
  ClassId true_label = 0;
  ClassId clean_prediction = 0;
  ClassId adv_prediction = 0;
  double l2_distance = 0.0;
  double linf_distance = 0.0;
  std::string attack_name;
  bool success = false;
  std::uint32_t iterations = 0;

  friend bool operator==(const AdversarialExample&, const AdversarialExample&) = default;
};

// Fills distances and the success flag from the images and predictions.
AdversarialExample make_adversarial(Image original, Image adversarial, ClassId true_label,
                                    ClassId clean_prediction, ClassId adv_prediction,
                                    std::string attack_name, std::uint32_t iterations = 0);

using AdversarialSet = std::vector<AdversarialExample>;

// "ADVRADVS" file, version 1. Layout is documented in docs/file-formats.md.
void save_adv_set(const std::filesystem::path& path, const AdversarialSet& set);
AdversarialSet load_adv_set(const std::filesystem::path& path);

// The adversarial images labeled with their true labels.
Dataset adversarial_dataset(const AdversarialSet& set, std::size_t class_count, Split split);

}  // namespace advr
