#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "advr/adversarial.hpp"
#include "advr/dataset.hpp"
#include "advr/ratio.hpp"

// True-label generator: PCA + K-nearest-neighbours against the original
// training corpus. Works on pixels and labels only.
namespace advr {

enum class PcaMethod {
  Auto,        // Covariance when dim <= 4096, Gram otherwise
  Covariance,  // eigenvectors of the D x D sample covariance
  Gram,        // eigenvectors of the N x N Gram matrix, mapped back
};

struct PcaProjection {
  std::vector<double> mean;                   // length D
  std::vector<std::vector<double>> components;  // d rows of length D, orthonormal
  std::vector<double> explained_variance_fractions;

  std::size_t input_dim() const { return mean.size(); }
  std::size_t dim() const { return components.size(); }

  friend bool operator==(const PcaProjection&, const PcaProjection&) = default;
};

// Top-d principal components of the rows (each a flattened sample). The first
// nonzero coordinate of each component is made positive. Throws
// InvalidArgument unless 1 <= d <= min(rows, D).
PcaProjection pca_fit(std::span<const std::vector<double>> rows, std::size_t d,
                      PcaMethod method = PcaMethod::Auto);
PcaProjection pca_fit(const Dataset& data, std::size_t d, PcaMethod method = PcaMethod::Auto);

// Identity map (zero mean, unit components); KNN in the full pixel space.
PcaProjection identity_projection(std::size_t dim);

std::vector<double> pca_project(const PcaProjection& p, std::span<const double> x);
std::vector<double> pca_project(const PcaProjection& p, const Image& image);

struct KnnResult {
  ClassId label = 0;          // fooling_class_id when is_fooling
  ClassId nearest_label = 0;  // K-NN vote, ignoring the threshold
  double nn_distance = 0.0;
  bool is_fooling = false;
};

class Labeler {
 public:
  // tau starts at +infinity (nothing routed to the fooling class) until
  // calibrate_threshold runs. fooling_class_id is class_count.
  Labeler(PcaProjection projection, const Dataset& reference, std::size_t k);
  // Raw constructor for tests and loading.
  Labeler(PcaProjection projection, std::vector<std::vector<double>> reference,
          std::vector<ClassId> labels, std::size_t class_count, std::size_t k,
          double tau = std::numeric_limits<double>::infinity());

  const PcaProjection& projection() const { return projection_; }
  const std::vector<std::vector<double>>& reference() const { return reference_; }
  const std::vector<ClassId>& labels() const { return labels_; }
  std::size_t class_count() const { return class_count_; }
  std::size_t k() const { return k_; }
  double tau() const { return tau_; }
  ClassId fooling_class_id() const { return class_count_; }

  void set_tau(double tau);

  friend bool operator==(const Labeler&, const Labeler&) = default;

 private:
  PcaProjection projection_;
  std::vector<std::vector<double>> reference_;
  std::vector<ClassId> labels_;
  std::size_t class_count_;
  std::size_t k_;
  double tau_;
};

// Reduced dimension used when none is configured: about 10% of the input.
std::size_t default_pca_dim(std::size_t input_dim, std::size_t samples);

// Vote among the k nearest references (L2 in projected space; equal
// distances resolve to the lower reference index, equal votes to the lower
// class id). Routed to the fooling class when the nearest distance exceeds tau.
KnnResult knn_label(const Labeler& labeler, const Image& image);
KnnResult knn_label_projected(const Labeler& labeler, std::span<const double> z);
std::vector<KnnResult> knn_label_all(const Labeler& labeler, std::span<const Image> images);

// Sets and returns tau = mean + 3 * stddev (population) of the validation
// images' nearest-reference distances. Throws InvalidArgument on fewer than
// 10 images.
double calibrate_threshold(Labeler& labeler, std::span<const Image> validation);
double calibrate_threshold(Labeler& labeler, const Dataset& validation);

// Fraction of adversarial images whose knn_label equals their true label.
// Throws InvalidArgument on an empty set.
Ratio label_accuracy(const Labeler& labeler, const AdversarialSet& set);
Ratio label_accuracy(const Labeler& labeler, const Dataset& data);

// "ADVRLABL" checkpoint, bit-exact round-trip.
void save_labeler(const std::filesystem::path& path, const Labeler& labeler);
Labeler load_labeler(const std::filesystem::path& path);

}  // namespace advr
