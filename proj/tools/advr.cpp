// advr: train -> attack -> label -> retrain -> re-evaluate from one JSON config.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "advr/errors.hpp"
#include "advr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace advr;

namespace {

struct Globals {
  std::string config;
  std::string out = "advr-out";
  std::optional<std::uint64_t> seed_data, seed_model, seed_attack;
};

RunConfig resolve(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required");
  RunConfig c = load_config(g.config);
  if (g.seed_data) c.seeds.data = *g.seed_data;
  if (g.seed_model) c.seeds.model = *g.seed_model;
  if (g.seed_attack) c.seeds.attack = *g.seed_attack;
  return c;
}

void log(const std::string& msg) { std::cout << msg << std::endl; }

std::string pct(const Ratio& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f (%zu/%zu)", r.value(), r.hits, r.total);
  return buf;
}

Classifier load_checkpoint(const std::string& flag, const Workspace& ws) {
  const fs::path p = flag.empty() ? ws.checkpoint("baseline.advrmodl") : fs::path(flag);
  return load_classifier(p);
}

AttackStage load_attack_outputs(const Workspace& ws) {
  AttackStage a;
  a.pool = load_adv_set(ws.adversarial("pool.advs"));
  a.held_out = load_adv_set(ws.adversarial("held_out.advs"));
  if (fs::exists(ws.adversarial("perturbation.advrupt"))) {
    a.perturbation = load_perturbation(ws.adversarial("perturbation.advrupt"));
  }
  return a;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial attack, true-label generation and retraining workbench"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--seed-data", g.seed_data, "Override seeds.data");
  app.add_option("--seed-model", g.seed_model, "Override seeds.model");
  app.add_option("--seed-attack", g.seed_attack, "Override seeds.attack");

  std::string checkpoint, adversarial;
  bool from_scratch = false;
  auto* train = app.add_subcommand("train", "Train the baseline classifier");
  auto* attack = app.add_subcommand("attack", "Generate adversarial pool and held-out sets");
  attack->add_option("--checkpoint", checkpoint, "Classifier checkpoint (default: <out>/checkpoints/baseline.advrmodl)");
  auto* label = app.add_subcommand("label", "Label adversarial images with PCA + KNN");
  label->add_option("--adversarial", adversarial, "Adversarial set (default: <out>/adversarial/pool.advs)");
  auto* retrain_cmd = app.add_subcommand("retrain", "Retrain on the adversarial pool and re-attack");
  retrain_cmd->add_option("--checkpoint", checkpoint, "Baseline checkpoint");
  retrain_cmd->add_flag("--from-scratch", from_scratch, "Train a fresh network instead of continuing");
  auto* eval = app.add_subcommand("eval", "Clean accuracy and fooling ratio of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Classifier checkpoint");
  eval->add_option("--adversarial", adversarial, "Adversarial set (default: <out>/adversarial/held_out.advs)");
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage");
  pipeline->add_flag("--from-scratch", from_scratch, "Retrain fresh networks instead of continuing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  std::string stage = "setup";
  std::optional<Workspace> ws;
  try {
    RunConfig config = resolve(g);
    if (from_scratch) config.retrain.from_scratch = true;
    ws.emplace(g.out);

    if (train->parsed()) {
      stage = "train";
      const Splits splits = load_splits(config);
      const TrainStage t = run_train(config, splits, &*ws);
      log("train accuracy " + std::to_string(t.metrics.train_accuracy));
      log("test accuracy " + pct(t.test_accuracy));
      log("checkpoint " + ws->checkpoint("baseline.advrmodl").string());
    } else if (attack->parsed()) {
      stage = "attack";
      const Classifier model = load_checkpoint(checkpoint, *ws);
      const Splits splits = load_splits(config);
      const AttackStage a = run_attack(config, model, splits, &*ws);
      log(std::string("attack ") + attack_name(config.attack.kind) + " fooling ratio " + pct(a.fooling_before));
      log("pool " + std::to_string(a.pool.size()) + " adversarials, held out " + std::to_string(a.held_out.size()));
    } else if (label->parsed()) {
      stage = "label";
      const Splits splits = load_splits(config);
      const AdversarialSet set = load_adv_set(adversarial.empty() ? ws->adversarial("pool.advs") : fs::path(adversarial));
      const LabelStage l = run_label(config, splits, set, &*ws);
      log("label accuracy " + pct(l.label_accuracy));
      log("fooling class " + std::to_string(l.labeler.fooling_class_id()) + ": " + std::to_string(l.fooling_routed) +
          " routed, tau " + std::to_string(l.labeler.tau()));
    } else if (retrain_cmd->parsed()) {
      stage = "retrain";
      const Classifier model = load_checkpoint(checkpoint, *ws);
      const Splits splits = load_splits(config);
      const AttackStage a = load_attack_outputs(*ws);
      std::optional<LabelStage> labels;
      if (config.retrain.label_source == LabelSource::Labeler) labels = run_label(config, splits, a.pool);
      for (const auto& r : run_retrain(config, model, splits, a, labels, &*ws)) {
        log(r.experiment_id + ": clean " + pct(r.clean_accuracy) + ", adversarial " + pct(r.adversarial_accuracy) +
            ", fooling after " + pct(r.fooling_ratio_after));
      }
    } else if (eval->parsed()) {
      stage = "eval";
      const Classifier model = load_checkpoint(checkpoint, *ws);
      const Splits splits = load_splits(config);
      const AdversarialSet set =
          load_adv_set(adversarial.empty() ? ws->adversarial("held_out.advs") : fs::path(adversarial));
      const Ratio acc = accuracy(model, splits.test);
      const Ratio fool = fooling_ratio(model, set);
      log("clean accuracy " + pct(acc));
      log("fooling ratio " + pct(fool));
      nlohmann::json r = {{"schema_version", kReportSchemaVersion},
                          {"stage", "eval"},
                          {"clean_accuracy", {{"hits", acc.hits}, {"total", acc.total}, {"value", acc.value()}}},
                          {"fooling_ratio", {{"hits", fool.hits}, {"total", fool.total}, {"value", fool.value()}}},
                          {"seeds", {{"data", config.seeds.data}, {"model", config.seeds.model}, {"attack", config.seeds.attack}}},
                          {"config", config_to_json(config)}};
      std::ofstream(ws->report("eval.json")) << r.dump(2) << '\n';
      ws->record(ws->report("eval.json"), "eval");
    } else if (pipeline->parsed()) {
      stage = "pipeline";
      const PipelineResult p = run_pipeline(config, &*ws);
      log("baseline test accuracy " + pct(p.train.test_accuracy));
      log("initial fooling ratio " + pct(p.attack.fooling_before));
      log("label accuracy " + pct(p.label.label_accuracy));
      for (const auto& r : p.reports) {
        log(r.experiment_id + ": clean " + pct(r.clean_accuracy) + ", adversarial " + pct(r.adversarial_accuracy) +
            ", fooling after " + pct(r.fooling_ratio_after));
      }
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error (" << stage << "): " << e.what() << std::endl;
    if (ws && stage != "pipeline") {
      try {
        ws->record_failure(stage, e.what());
      } catch (...) {
      }
    }
    return exit_code_for(e);
  }
}
