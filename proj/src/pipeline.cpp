#include "advr/pipeline.hpp"

#include <openssl/evp.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "advr/errors.hpp"
#include "advr/parallel.hpp"

namespace advr {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- workspace ----------------------------------------------------------------

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw StateError("sha256: digest init failed");
  }
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

Workspace::Workspace(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  for (const char* dir : {"checkpoints", "adversarial", "reports"}) {
    fs::create_directories(root_ / dir, ec);
    if (ec) throw DataError("cannot create " + (root_ / dir).string() + ": " + ec.message());
  }
  std::ifstream in(root_ / "MANIFEST");
  std::string line;
  while (std::getline(in, line)) {
    std::array<std::string, 3> fields;
    std::istringstream ls(line);
    for (auto& f : fields) std::getline(ls, f, '\t');
    if (!fields[0].empty()) entries_.push_back(fields);
  }
}

fs::path Workspace::checkpoint(const std::string& name) const { return root_ / "checkpoints" / name; }
fs::path Workspace::adversarial(const std::string& name) const { return root_ / "adversarial" / name; }
fs::path Workspace::report(const std::string& name) const { return root_ / "reports" / name; }

void Workspace::record(const fs::path& artifact, const std::string& stage) {
  const std::string rel = fs::relative(artifact, root_).generic_string();
  std::array<std::string, 3> entry{rel, stage, sha256_file(artifact)};
  std::erase_if(entries_, [&](const auto& e) { return e[0] == rel || (e[0] == "!failed" && e[1] == stage); });
  entries_.push_back(entry);
  write_manifest();
}

void Workspace::record_failure(const std::string& stage, const std::string& message) {
  std::string flat = message;
  for (char& c : flat) {
    if (c == '\t' || c == '\n') c = ' ';
  }
  std::erase_if(entries_, [&](const auto& e) { return e[0] == "!failed" && e[1] == stage; });
  entries_.push_back({"!failed", stage, flat});
  write_manifest();
}

void Workspace::write_manifest() const {
  std::ofstream out(root_ / "MANIFEST", std::ios::trunc);
  for (const auto& e : entries_) out << e[0] << '\t' << e[1] << '\t' << e[2] << '\n';
  if (!out) throw DataError("cannot write " + (root_ / "MANIFEST").string());
}

// ---- helpers -------------------------------------------------------------------------

namespace {

json ratio_json(const Ratio& r) { return {{"hits", r.hits}, {"total", r.total}, {"value", r.value()}}; }

json seeds_json(const Seeds& s) { return {{"data", s.data}, {"model", s.model}, {"attack", s.attack}}; }

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + path.string());
}

json stage_report(const RunConfig& config, const std::string& stage) {
  return {{"schema_version", kReportSchemaVersion},
          {"stage", stage},
          {"experiment_id", config.experiment_id},
          {"seeds", seeds_json(config.seeds)},
          {"config", config_to_json(config)}};
}

AttackSpec seeded_attack(const RunConfig& config) {
  AttackSpec spec = config.attack;
  spec.generator.seed = config.seeds.attack;
  spec.universal.seed = config.seeds.attack;
  return spec;
}

Dataset cap_per_class(const Dataset& data, const std::optional<std::size_t>& cap) {
  if (!cap) return data;
  return split_per_class(data, *cap, data.split(), data.split()).first;
}

template <typename F>
auto run_stage(Workspace* ws, const std::string& stage, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    if (ws) ws->record_failure(stage, e.what());
    throw;
  }
}

}  // namespace

Splits load_splits(const RunConfig& config) {
  const auto& d = config.data;
  if (d.validation_per_class == 0) throw ConfigError("'dataset.validation_per_class' must be >= 1");
  if (d.synthetic) {
    const auto& s = *d.synthetic;
    const Dataset all = synth_dataset(config.seeds.data, s.classes,
                                      d.train_per_class + d.validation_per_class + d.test_per_class, s.shape,
                                      s.texture);
    auto [train, rest] = split_per_class(all, d.train_per_class, Split::Train, Split::Test);
    auto [val, test] = split_per_class(rest, d.validation_per_class, Split::Validation, Split::Test);
    return {std::move(train), std::move(val), std::move(test)};
  }
  const Dataset train_all =
      load_cifar10(*d.cifar10, d.train_per_class + d.validation_per_class, Split::Train);
  auto [train, val] = split_per_class(train_all, d.train_per_class, Split::Train, Split::Validation);
  Dataset test = load_cifar10(*d.cifar10, d.test_per_class, Split::Test);
  return {std::move(train), std::move(val), std::move(test)};
}

std::vector<std::size_t> sweep_counts(const RetrainConfig& retrain, std::size_t pool_size) {
  if (!retrain.counts.empty()) {
    for (std::size_t c : retrain.counts) {
      if (c > pool_size) {
        throw ConfigError("'retrain.counts' entry " + std::to_string(c) + " exceeds the pool of " +
                          std::to_string(pool_size) + " adversarials");
      }
    }
    return retrain.counts;
  }
  std::vector<std::size_t> out;
  for (double f : retrain.fractions) out.push_back(static_cast<std::size_t>(std::llround(f * double(pool_size))));
  return out;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InvalidArgument*>(&e)) return 2;
  if (dynamic_cast<const ShapeError*>(&e)) return 3;
  if (dynamic_cast<const DataError*>(&e)) return 4;
  if (dynamic_cast<const DivergenceError*>(&e)) return 5;
  return 1;
}

// ---- stages -----------------------------------------------------------------------------

TrainStage run_train(const RunConfig& config, const Splits& splits, Workspace* ws) {
  TrainConfig tc = config.model.train;
  tc.seed = config.seeds.model;
  auto trained = train_classifier(splits.train, tc, config.model.shape, &splits.test);
  TrainStage out{std::move(trained.model), std::move(trained.metrics), {}};
  out.test_accuracy = accuracy(out.model, splits.test);
  if (ws) {
    const auto ckpt = ws->checkpoint("baseline.advrmodl");
    save_classifier(ckpt, out.model);
    ws->record(ckpt, "train");
    json r = stage_report(config, "train");
    r["initial_loss"] = out.metrics.initial_loss;
    r["epoch_loss"] = out.metrics.epoch_loss;
    r["train_accuracy"] = out.metrics.train_accuracy;
    r["test_accuracy"] = ratio_json(out.test_accuracy);
    write_json(ws->report("train.json"), r);
    ws->record(ws->report("train.json"), "train");
  }
  return out;
}

AttackStage run_attack(const RunConfig& config, const Classifier& model, const Splits& splits, Workspace* ws) {
  if (model.input_shape() != splits.train.image_shape()) {
    throw ShapeError("checkpoint expects images " + shape_str(model.input_shape()) + ", dataset has " +
                     shape_str(splits.train.image_shape()));
  }
  if (model.class_count() < splits.train.class_count()) {
    throw ShapeError("checkpoint has " + std::to_string(model.class_count()) + " classes, dataset " +
                     std::to_string(splits.train.class_count()));
  }
  const AttackSpec spec = seeded_attack(config);
  const Dataset pool_data = cap_per_class(splits.train, config.retrain.pool_per_class);
  const Dataset eval_data = cap_per_class(splits.test, config.retrain.eval_per_class);
  AttackStage out;
  if (spec.kind == AttackKind::Gap) {
    Generator generator(model.input_shape(), spec.generator);
    out.perturbation = train_universal(model, generator, pool_data, spec.universal);
    out.pool = universal_dataset(model, *out.perturbation, pool_data);
    out.held_out = universal_dataset(model, *out.perturbation, eval_data);
  } else {
    out.pool = attack_dataset(model, pool_data, spec);
    out.held_out = attack_dataset(model, eval_data, spec);
  }
  out.fooling_before = fooling_ratio(model, out.held_out);
  if (ws) {
    save_adv_set(ws->adversarial("pool.advs"), out.pool);
    ws->record(ws->adversarial("pool.advs"), "attack");
    save_adv_set(ws->adversarial("held_out.advs"), out.held_out);
    ws->record(ws->adversarial("held_out.advs"), "attack");
    if (out.perturbation) {
      save_perturbation(ws->adversarial("perturbation.advrupt"), *out.perturbation);
      ws->record(ws->adversarial("perturbation.advrupt"), "attack");
    }
    double l2 = 0.0, linf = 0.0;
    for (const auto& ex : out.held_out) {
      l2 += ex.l2_distance;
      linf = std::max(linf, ex.linf_distance);
    }
    json r = stage_report(config, "attack");
    r["attack"] = attack_name(spec.kind);
    r["epsilon"] = spec.epsilon;
    r["fooling_ratio"] = ratio_json(out.fooling_before);
    r["pool_fooling_ratio"] = ratio_json(fooling_ratio(model, out.pool));
    r["mean_l2"] = l2 / double(out.held_out.size());
    r["max_linf"] = linf;
    write_json(ws->report("attack.json"), r);
    ws->record(ws->report("attack.json"), "attack");
  }
  return out;
}

LabelStage run_label(const RunConfig& config, const Splits& splits, const AdversarialSet& set, Workspace* ws) {
  if (set.empty()) throw DataError("label: empty adversarial set");
  const std::size_t input = shape_size(splits.train.image_shape());
  if (set.front().adversarial.shape() != splits.train.image_shape()) {
    throw ShapeError("label: adversarial images " + shape_str(set.front().adversarial.shape()) +
                     " do not match the reference corpus " + shape_str(splits.train.image_shape()));
  }
  const std::size_t d = config.labeler.dim.value_or(default_pca_dim(input, splits.train.size()));
  Labeler labeler(pca_fit(splits.train, d), splits.train, config.labeler.k);
  calibrate_threshold(labeler, splits.validation);

  std::vector<Image> images;
  images.reserve(set.size());
  for (const auto& ex : set) images.push_back(ex.adversarial);
  LabelStage out{std::move(labeler), {}, {0, set.size()}, 0};
  out.results = knn_label_all(out.labeler, images);
  for (std::size_t i = 0; i < set.size(); ++i) {
    out.label_accuracy.hits += out.results[i].label == set[i].true_label;
    out.fooling_routed += out.results[i].is_fooling;
  }
  if (ws) {
    save_labeler(ws->checkpoint("labeler.advrlabl"), out.labeler);
    ws->record(ws->checkpoint("labeler.advrlabl"), "label");
    std::vector<LabeledExample> labeled;
    for (std::size_t i = 0; i < set.size(); ++i) labeled.push_back({set[i].adversarial, out.results[i].label});
    save_dataset(ws->adversarial("labeled.advrdset"),
                 Dataset(std::move(labeled), out.labeler.class_count() + 1, Split::Train));
    ws->record(ws->adversarial("labeled.advrdset"), "label");
    json r = stage_report(config, "label");
    r["pca_dim"] = d;
    r["k"] = out.labeler.k();
    r["tau"] = out.labeler.tau();
    r["fooling_class_id"] = out.labeler.fooling_class_id();
    r["label_accuracy"] = ratio_json(out.label_accuracy);
    r["fooling_routed"] = out.fooling_routed;
    r["labeled"] = set.size();
    write_json(ws->report("label.json"), r);
    ws->record(ws->report("label.json"), "label");
  }
  return out;
}

std::vector<ExperimentReport> run_retrain(const RunConfig& config, const Classifier& baseline,
                                          const Splits& splits, const AttackStage& attack,
                                          const std::optional<LabelStage>& labels, Workspace* ws) {
  const bool fooling = config.labeler.fooling_class;
  const LabelSource source = config.retrain.label_source;
  AdversarialPool pool;
  if (source == LabelSource::Labeler) {
    if (!labels) throw ConfigError("'retrain.label_source' is labeler but no labels were produced");
    if (labels->results.size() != attack.pool.size()) {
      throw DataError("retrain: " + std::to_string(labels->results.size()) + " labels for " +
                      std::to_string(attack.pool.size()) + " adversarials");
    }
    std::vector<ClassId> ids;
    for (const auto& r : labels->results) ids.push_back(fooling ? r.label : r.nearest_label);
    pool = labeler_labeled(attack.pool, std::move(ids));
  } else {
    pool = attacker_labeled(attack.pool);
  }

  const Classifier start = fooling ? extend_classes(baseline, 1, splits.train, config.seeds.model) : baseline;
  const Ratio baseline_accuracy = accuracy(baseline, splits.test);
  const AttackSpec spec = seeded_attack(config);
  const Dataset eval_data = cap_per_class(splits.test, config.retrain.eval_per_class);
  TrainConfig tc = config.retrain.train;
  tc.seed = config.seeds.model;

  std::vector<ExperimentReport> reports;
  for (std::size_t count : sweep_counts(config.retrain, pool.set.size())) {
    RetrainPlan plan{splits.train, {pool}, count, fooling, tc};
    const Dataset set = build_retrain_set(plan, config.seeds.attack);
    const RetrainResult rr = retrain(start, set, tc, config.retrain.from_scratch, &splits.test);
    const ReattackResult re = reattack(rr.model, eval_data, spec, attack.perturbation);

    ExperimentReport r;
    r.experiment_id = config.experiment_id + "/n" + std::to_string(count);
    r.attack = attack_name(spec.kind);
    r.label_source = label_source_name(source);
    r.adversarial_count = count;
    r.baseline_accuracy = baseline_accuracy;
    r.clean_accuracy = accuracy(rr.model, splits.test);
    r.adversarial_accuracy = adversarial_accuracy(rr.model, attack.held_out);
    r.fooling_ratio_before = attack.fooling_before;
    r.fooling_ratio_after = re.fooling;
    if (labels) r.label_recovery_accuracy = labels->label_accuracy;
    r.seeds = config.seeds;
    r.config = config_to_json(config);
    reports.push_back(std::move(r));

    if (ws) {
      const auto ckpt = ws->checkpoint("retrained-n" + std::to_string(count) + ".advrmodl");
      save_classifier(ckpt, rr.model);
      ws->record(ckpt, "retrain");
    }
  }
  if (ws) {
    emit_report(reports, ws->report("retrain.json"), ReportFormat::Json);
    ws->record(ws->report("retrain.json"), "retrain");
    emit_report(reports, ws->report("retrain.tsv"), ReportFormat::Tsv);
    ws->record(ws->report("retrain.tsv"), "retrain");
  }
  return reports;
}

PipelineResult run_pipeline(const RunConfig& config, Workspace* ws) {
  if (ws) {
    write_json(ws->root() / "config.json", config_to_json(config));
    ws->record(ws->root() / "config.json", "config");
  }
  const Splits splits = run_stage(ws, "data", [&] { return load_splits(config); });
  TrainStage train = run_stage(ws, "train", [&] { return run_train(config, splits, ws); });
  AttackStage attack = run_stage(ws, "attack", [&] { return run_attack(config, train.model, splits, ws); });
  LabelStage label = run_stage(ws, "label", [&] { return run_label(config, splits, attack.pool, ws); });
  auto reports = run_stage(ws, "retrain", [&] {
    return run_retrain(config, train.model, splits, attack, std::optional<LabelStage>(label), ws);
  });
  if (ws) {
    emit_report(reports, ws->report("pipeline.json"), ReportFormat::Json);
    ws->record(ws->report("pipeline.json"), "pipeline");
    emit_report(reports, ws->report("pipeline.tsv"), ReportFormat::Tsv);
    ws->record(ws->report("pipeline.tsv"), "pipeline");
  }
  return {std::move(train), std::move(attack), std::move(label), std::move(reports)};
}

}  // namespace advr
