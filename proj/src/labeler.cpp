#include "advr/labeler.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "advr/binio.hpp"
#include "advr/errors.hpp"
#include "advr/parallel.hpp"

namespace advr {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr std::size_t kCovarianceMaxDim = 4096;

void fix_sign(std::vector<double>& v) {
  for (double x : v) {
    if (x == 0.0) continue;
    if (x < 0.0) {
      for (double& y : v) y = -y;
    }
    return;
  }
}

// Eigen's solver sorts ascending; return indices of the d largest, descending.
std::vector<Eigen::Index> top_indices(const VectorXd& values, std::size_t d) {
  std::vector<Eigen::Index> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return values[a] > values[b]; });
  idx.resize(d);
  return idx;
}

// Orthonormal completion for components the Gram path cannot recover (zero
// eigenvalue): Gram-Schmidt over the standard basis.
std::vector<double> complete_basis(const std::vector<std::vector<double>>& have, std::size_t dim) {
  for (std::size_t e = 0; e < dim; ++e) {
    std::vector<double> v(dim, 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : have) {
        const double p = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
        for (std::size_t i = 0; i < dim; ++i) v[i] -= p * u[i];
      }
    }
    const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (n > 1e-6) {
      for (double& x : v) x /= n;
      return v;
    }
  }
  throw StateError("pca: could not complete an orthonormal basis");
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

}  // namespace

PcaProjection pca_fit(std::span<const std::vector<double>> rows, std::size_t d, PcaMethod method) {
  if (rows.empty()) throw InvalidArgument("pca_fit: no samples");
  const std::size_t n = rows.size(), dim = rows.front().size();
  if (dim == 0) throw InvalidArgument("pca_fit: zero-length samples");
  if (d < 1 || d > std::min(n, dim)) {
    throw InvalidArgument("pca_fit: d=" + std::to_string(d) + " must be in [1, min(" +
                          std::to_string(n) + ", " + std::to_string(dim) + ")]");
  }
  MatrixXd x(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != dim) throw ShapeError("pca_fit: samples differ in length");
    for (std::size_t j = 0; j < dim; ++j) x(i, j) = rows[i][j];
  }
  const VectorXd mean = x.colwise().mean();
  x.rowwise() -= mean.transpose();
  const double denom = n > 1 ? double(n - 1) : 1.0;
  const double total_var = x.squaredNorm() / denom;

  if (method == PcaMethod::Auto) method = dim <= kCovarianceMaxDim ? PcaMethod::Covariance : PcaMethod::Gram;

  PcaProjection p;
  p.mean.assign(mean.data(), mean.data() + dim);
  std::vector<double> eigenvalues;

  if (method == PcaMethod::Covariance) {
    const MatrixXd cov = (x.transpose() * x) / denom;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw DivergenceError("pca_fit: eigendecomposition failed");
    for (auto k : top_indices(es.eigenvalues(), d)) {
      const VectorXd v = es.eigenvectors().col(k);
      p.components.emplace_back(v.data(), v.data() + dim);
      eigenvalues.push_back(std::max(0.0, es.eigenvalues()[k]));
    }
  } else {
    const MatrixXd gram = x * x.transpose();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
    if (es.info() != Eigen::Success) throw DivergenceError("pca_fit: eigendecomposition failed");
    const double lmax = std::max(es.eigenvalues().maxCoeff(), 0.0);
    for (auto k : top_indices(es.eigenvalues(), d)) {
      const double lambda = es.eigenvalues()[k];
      if (lambda > 1e-12 * lmax && lambda > 0.0) {
        VectorXd v = x.transpose() * es.eigenvectors().col(k);
        v.normalize();
        p.components.emplace_back(v.data(), v.data() + dim);
        eigenvalues.push_back(lambda / denom);
      } else {
        p.components.push_back(complete_basis(p.components, dim));
        eigenvalues.push_back(0.0);
      }
    }
  }
  for (auto& c : p.components) fix_sign(c);
  for (double l : eigenvalues) p.explained_variance_fractions.push_back(total_var > 0 ? l / total_var : 0.0);
  return p;
}

PcaProjection pca_fit(const Dataset& data, std::size_t d, PcaMethod method) {
  std::vector<std::vector<double>> rows;
  rows.reserve(data.size());
  for (const auto& ex : data.examples()) rows.emplace_back(ex.image.pixels().begin(), ex.image.pixels().end());
  return pca_fit(rows, d, method);
}

PcaProjection identity_projection(std::size_t dim) {
  PcaProjection p;
  p.mean.assign(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    std::vector<double> e(dim, 0.0);
    e[i] = 1.0;
    p.components.push_back(std::move(e));
  }
  p.explained_variance_fractions.assign(dim, 0.0);
  return p;
}

std::vector<double> pca_project(const PcaProjection& p, std::span<const double> x) {
  if (x.size() != p.input_dim()) {
    throw ShapeError("pca_project: input length " + std::to_string(x.size()) + ", projection expects " +
                     std::to_string(p.input_dim()));
  }
  std::vector<double> centered(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) centered[i] = x[i] - p.mean[i];
  std::vector<double> z(p.dim());
  for (std::size_t k = 0; k < p.dim(); ++k) {
    z[k] = std::inner_product(centered.begin(), centered.end(), p.components[k].begin(), 0.0);
  }
  return z;
}

std::vector<double> pca_project(const PcaProjection& p, const Image& image) {
  return pca_project(p, image.pixels());
}

// ---- Labeler ----------------------------------------------------------------------

Labeler::Labeler(PcaProjection projection, const Dataset& reference, std::size_t k)
    : projection_(std::move(projection)),
      class_count_(reference.class_count()),
      k_(k),
      tau_(std::numeric_limits<double>::infinity()) {
  if (k_ < 1) throw InvalidArgument("labeler: k must be >= 1");
  reference_.resize(reference.size());
  labels_.resize(reference.size());
  parallel_for(reference.size(), [&](std::size_t i) {
    reference_[i] = pca_project(projection_, reference[i].image);
    labels_[i] = reference[i].label;
  });
}

Labeler::Labeler(PcaProjection projection, std::vector<std::vector<double>> reference,
                 std::vector<ClassId> labels, std::size_t class_count, std::size_t k, double tau)
    : projection_(std::move(projection)),
      reference_(std::move(reference)),
      labels_(std::move(labels)),
      class_count_(class_count),
      k_(k),
      tau_(tau) {
  if (k_ < 1) throw InvalidArgument("labeler: k must be >= 1");
  if (reference_.empty()) throw InvalidArgument("labeler: empty reference set");
  if (reference_.size() != labels_.size()) throw ShapeError("labeler: reference/label count mismatch");
  for (const auto& r : reference_) {
    if (r.size() != projection_.dim()) throw ShapeError("labeler: reference vector length differs from d");
  }
  for (ClassId l : labels_) {
    if (l >= class_count_) throw InvalidArgument("labeler: label out of range");
  }
  set_tau(tau);
}

void Labeler::set_tau(double tau) {
  if (std::isnan(tau) || tau < 0.0) throw InvalidArgument("labeler: tau must be >= 0");
  tau_ = tau;
}

std::size_t default_pca_dim(std::size_t input_dim, std::size_t samples) {
  const std::size_t d = std::max<std::size_t>(1, (input_dim + 5) / 10);
  return std::min({d, input_dim, samples});
}

KnnResult knn_label_projected(const Labeler& labeler, std::span<const double> z) {
  const auto& ref = labeler.reference();
  if (z.size() != labeler.projection().dim()) throw ShapeError("knn_label: query length differs from d");
  std::vector<std::pair<double, std::size_t>> dist(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) dist[i] = {sq_dist(z, ref[i]), i};
  const std::size_t k = std::min(labeler.k(), ref.size());
  std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

  std::vector<std::size_t> votes(labeler.class_count(), 0);
  for (std::size_t i = 0; i < k; ++i) ++votes[labeler.labels()[dist[i].second]];
  KnnResult r;
  r.nearest_label = std::max_element(votes.begin(), votes.end()) - votes.begin();
  r.nn_distance = std::sqrt(dist.front().first);
  r.is_fooling = r.nn_distance > labeler.tau();
  r.label = r.is_fooling ? labeler.fooling_class_id() : r.nearest_label;
  return r;
}

KnnResult knn_label(const Labeler& labeler, const Image& image) {
  return knn_label_projected(labeler, pca_project(labeler.projection(), image));
}

std::vector<KnnResult> knn_label_all(const Labeler& labeler, std::span<const Image> images) {
  std::vector<KnnResult> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) { out[i] = knn_label(labeler, images[i]); });
  return out;
}

double calibrate_threshold(Labeler& labeler, std::span<const Image> validation) {
  if (validation.size() < 10) {
    throw InvalidArgument("calibrate_threshold: need at least 10 validation images, got " +
                          std::to_string(validation.size()));
  }
  const auto results = knn_label_all(labeler, validation);
  double mean = 0.0;
  for (const auto& r : results) mean += r.nn_distance;
  mean /= double(results.size());
  double var = 0.0;
  for (const auto& r : results) var += (r.nn_distance - mean) * (r.nn_distance - mean);
  var /= double(results.size());
  const double tau = mean + 3.0 * std::sqrt(var);
  labeler.set_tau(tau);
  return tau;
}

double calibrate_threshold(Labeler& labeler, const Dataset& validation) {
  std::vector<Image> images;
  images.reserve(validation.size());
  for (const auto& ex : validation.examples()) images.push_back(ex.image);
  return calibrate_threshold(labeler, images);
}

Ratio label_accuracy(const Labeler& labeler, const AdversarialSet& set) {
  if (set.empty()) throw InvalidArgument("label_accuracy: empty adversarial set");
  std::vector<Image> images;
  images.reserve(set.size());
  for (const auto& ex : set) images.push_back(ex.adversarial);
  const auto results = knn_label_all(labeler, images);
  Ratio r{0, set.size()};
  for (std::size_t i = 0; i < set.size(); ++i) r.hits += results[i].label == set[i].true_label;
  return r;
}

Ratio label_accuracy(const Labeler& labeler, const Dataset& data) {
  std::vector<Image> images;
  images.reserve(data.size());
  for (const auto& ex : data.examples()) images.push_back(ex.image);
  const auto results = knn_label_all(labeler, images);
  Ratio r{0, data.size()};
  for (std::size_t i = 0; i < data.size(); ++i) r.hits += results[i].label == data[i].label;
  return r;
}

// ---- checkpoint ----------------------------------------------------------------------

namespace {
constexpr std::string_view kMagic = "ADVRLABL";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_labeler(const std::filesystem::path& path, const Labeler& labeler) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  binio::Writer w(out);
  const auto& p = labeler.projection();
  w.magic(kMagic);
  w.u32(kVersion);
  w.u64(labeler.class_count());
  w.u64(labeler.k());
  w.f64(labeler.tau());
  w.u64(p.input_dim());
  w.u64(p.dim());
  w.f64s(p.mean);
  for (const auto& c : p.components) w.f64s(c);
  w.f64s(p.explained_variance_fractions);
  w.u64(labeler.reference().size());
  for (std::size_t i = 0; i < labeler.reference().size(); ++i) {
    w.u64(labeler.labels()[i]);
    w.f64s(labeler.reference()[i]);
  }
  if (!out) throw DataError("write failed: " + path.string());
}

Labeler load_labeler(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  binio::Reader r(in, path.string());
  r.expect_magic(kMagic);
  if (r.u32() != kVersion) throw DataError(path.string() + ": unsupported labeler version");
  const std::size_t class_count = r.u64();
  const std::size_t k = r.u64();
  const double tau = r.f64();
  const std::size_t dim = r.u64(), d = r.u64();
  if (d > dim) throw DataError(path.string() + ": projection dimension exceeds input dimension");
  PcaProjection p;
  p.mean.resize(dim);
  r.f64s(p.mean);
  p.components.assign(d, std::vector<double>(dim));
  for (auto& c : p.components) r.f64s(c);
  p.explained_variance_fractions.resize(d);
  r.f64s(p.explained_variance_fractions);
  const std::size_t n = r.u64();
  std::vector<std::vector<double>> reference(n, std::vector<double>(d));
  std::vector<ClassId> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = r.u64();
    r.f64s(reference[i]);
  }
  r.expect_end();
  return Labeler(std::move(p), std::move(reference), std::move(labels), class_count, k, tau);
}

}  // namespace advr
