#include "advr/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <functional>

#include "advr/errors.hpp"
#include "advr/parallel.hpp"

namespace advr {

namespace {

std::vector<ClassId> predictions(const Classifier& model, std::size_t n,
                                 const std::function<const Tensor&(std::size_t)>& image) {
  std::vector<ClassId> out(n);
  parallel_chunks(n, [&](std::size_t begin, std::size_t end) {
    ClassifierSession s(model);
    for (std::size_t i = begin; i < end; ++i) out[i] = s.predict(image(i)).label;
  });
  return out;
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

nlohmann::json ratio_json(const Ratio& r) {
  return {{"hits", r.hits}, {"total", r.total}, {"value", r.value()}};
}

Ratio ratio_from(const nlohmann::json& j) { return Ratio{j.at("hits").get<std::size_t>(), j.at("total").get<std::size_t>()}; }

}  // namespace

Ratio fooling_ratio(const Classifier& model, const AdversarialSet& set) {
  if (set.empty()) throw InvalidArgument("fooling_ratio: empty adversarial set");
  const auto pred = predictions(model, set.size(), [&](std::size_t i) -> const Tensor& {
    return set[i].adversarial.tensor();
  });
  Ratio r{0, set.size()};
  for (std::size_t i = 0; i < set.size(); ++i) r.hits += pred[i] != set[i].true_label;
  return r;
}

Ratio adversarial_accuracy(const Classifier& model, const AdversarialSet& set) {
  const Ratio f = fooling_ratio(model, set);
  return Ratio{f.total - f.hits, f.total};
}

Ratio accuracy(const Classifier& model, std::span<const LabeledExample> examples) {
  if (examples.empty()) throw InvalidArgument("accuracy: empty dataset");
  const auto pred = predictions(model, examples.size(), [&](std::size_t i) -> const Tensor& {
    return examples[i].image.tensor();
  });
  Ratio r{0, examples.size()};
  for (std::size_t i = 0; i < examples.size(); ++i) r.hits += pred[i] == examples[i].label;
  return r;
}

Ratio accuracy(const Classifier& model, const Dataset& data) { return accuracy(model, data.examples()); }

// ---- reports ----------------------------------------------------------------------

nlohmann::json report_to_json(const ExperimentReport& r) {
  nlohmann::json j = {
      {"experiment_id", r.experiment_id},
      {"attack", r.attack},
      {"label_source", r.label_source},
      {"adversarial_count", r.adversarial_count},
      {"baseline_accuracy", ratio_json(r.baseline_accuracy)},
      {"clean_accuracy", ratio_json(r.clean_accuracy)},
      {"adversarial_accuracy", ratio_json(r.adversarial_accuracy)},
      {"fooling_ratio_before", ratio_json(r.fooling_ratio_before)},
      {"fooling_ratio_after", ratio_json(r.fooling_ratio_after)},
      {"label_recovery_accuracy", nullptr},
      {"seeds", {{"data", r.seeds.data}, {"model", r.seeds.model}, {"attack", r.seeds.attack}}},
      {"config", r.config},
  };
  if (r.label_recovery_accuracy) j["label_recovery_accuracy"] = ratio_json(*r.label_recovery_accuracy);
  return j;
}

ExperimentReport report_from_json(const nlohmann::json& j) {
  try {
    ExperimentReport r;
    r.experiment_id = j.at("experiment_id").get<std::string>();
    r.attack = j.at("attack").get<std::string>();
    r.label_source = j.at("label_source").get<std::string>();
    r.adversarial_count = j.at("adversarial_count").get<std::size_t>();
    r.baseline_accuracy = ratio_from(j.at("baseline_accuracy"));
    r.clean_accuracy = ratio_from(j.at("clean_accuracy"));
    r.adversarial_accuracy = ratio_from(j.at("adversarial_accuracy"));
    r.fooling_ratio_before = ratio_from(j.at("fooling_ratio_before"));
    r.fooling_ratio_after = ratio_from(j.at("fooling_ratio_after"));
    if (!j.at("label_recovery_accuracy").is_null()) {
      r.label_recovery_accuracy = ratio_from(j.at("label_recovery_accuracy"));
    }
    const auto& s = j.at("seeds");
    r.seeds = {s.at("data").get<std::uint64_t>(), s.at("model").get<std::uint64_t>(),
               s.at("attack").get<std::uint64_t>()};
    r.config = j.at("config");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

std::vector<std::string> tsv_header() {
  return {"Experiment",
          "Attack",
          "Label Source",
          "Adversarial Images used for Retraining",
          "Accuracy on Original Images",
          "Accuracy on Adversarial Images",
          "Initial Fooling Ratio",
          "Fooling Ratio after Retraining",
          "Label Recovery Accuracy"};
}

void emit_report(std::span<const ExperimentReport> reports, const std::filesystem::path& path,
                 ReportFormat format) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write report " + path.string());
  if (format == ReportFormat::Json) {
    nlohmann::json j = {{"schema_version", kReportSchemaVersion}, {"reports", nlohmann::json::array()}};
    for (const auto& r : reports) j["reports"].push_back(report_to_json(r));
    out << j.dump(2) << '\n';
  } else {
    const auto header = tsv_header();
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "\t" : "") << header[i];
    out << '\n';
    for (const auto& r : reports) {
      out << r.experiment_id << '\t' << r.attack << '\t' << r.label_source << '\t' << r.adversarial_count
          << '\t' << fixed4(r.clean_accuracy.value()) << '\t' << fixed4(r.adversarial_accuracy.value())
          << '\t' << fixed4(r.fooling_ratio_before.value()) << '\t' << fixed4(r.fooling_ratio_after.value())
          << '\t' << (r.label_recovery_accuracy ? fixed4(r.label_recovery_accuracy->value()) : "-") << '\n';
    }
  }
  if (!out) throw DataError("write failed: " + path.string());
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& path, ReportFormat format) {
  emit_report(std::span<const ExperimentReport>(&report, 1), path, format);
}

std::vector<ExperimentReport> load_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!j.contains("schema_version") || j["schema_version"] != kReportSchemaVersion) {
    throw DataError(path.string() + ": unsupported report schema_version");
  }
  std::vector<ExperimentReport> out;
  for (const auto& r : j.at("reports")) out.push_back(report_from_json(r));
  return out;
}

}  // namespace advr
