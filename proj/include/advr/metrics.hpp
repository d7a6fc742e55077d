#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "advr/adversarial.hpp"
#include "advr/classifier.hpp"
#include "advr/dataset.hpp"
#include "advr/ratio.hpp"

namespace advr {

// Fraction of adversarial images the classifier does not assign their true
// label. Counts every record, including ones whose original was already
// misclassified. Throws InvalidArgument on an empty set.
Ratio fooling_ratio(const Classifier& model, const AdversarialSet& set);

// Fraction of adversarial images classified as their true label
// (1 - fooling_ratio on the same set).
Ratio adversarial_accuracy(const Classifier& model, const AdversarialSet& set);

// Throws InvalidArgument on an empty dataset.
Ratio accuracy(const Classifier& model, const Dataset& data);
Ratio accuracy(const Classifier& model, std::span<const LabeledExample> examples);

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t model = 1;
  std::uint64_t attack = 1;

  friend bool operator==(const Seeds&, const Seeds&) = default;
};

inline constexpr int kReportSchemaVersion = 1;

struct ExperimentReport {
  std::string experiment_id;
  std::string attack;
  std::string label_source;  // "attacker" or "labeler"
  std::size_t adversarial_count = 0;
  Ratio baseline_accuracy;     // clean test accuracy before retraining
  Ratio clean_accuracy;        // clean test accuracy after retraining
  Ratio adversarial_accuracy;  // held-out adversarials, true labels, after retraining
  Ratio fooling_ratio_before;
  Ratio fooling_ratio_after;
  std::optional<Ratio> label_recovery_accuracy;
  Seeds seeds;
  nlohmann::json config;  // echo of the full run configuration

  friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

enum class ReportFormat { Json, Tsv };

nlohmann::json report_to_json(const ExperimentReport& report);
// Throws DataError on a missing field or a different schema_version.
ExperimentReport report_from_json(const nlohmann::json& j);

// Json writes {"schema_version", "reports": [...]}; Tsv writes one header row
// and one row per report, ratios with 4 decimals.
void emit_report(std::span<const ExperimentReport> reports, const std::filesystem::path& path,
                 ReportFormat format);
void emit_report(const ExperimentReport& report, const std::filesystem::path& path, ReportFormat format);
std::vector<ExperimentReport> load_reports(const std::filesystem::path& path);

// Column names of the tabular format, in order.
std::vector<std::string> tsv_header();

}  // namespace advr
