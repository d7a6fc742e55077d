#include "advr/config.hpp"

#include <fstream>
#include <set>

#include "advr/errors.hpp"

namespace advr {

namespace {

using nlohmann::json;

// Reads keys from one JSON object, remembering which were used so unknown
// keys can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  Section sub(const std::string& key) {
    used_.insert(key);
    return Section(has(key) ? j_.at(key) : empty(), path_.empty() ? key : path_ + "." + key);
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown key " + where(key));
    }
  }

  std::string where(const std::string& key = "") const {
    const std::string p = key.empty() ? path_ : (path_.empty() ? key : path_ + "." + key);
    return "'" + (p.empty() ? std::string("<root>") : p) + "'";
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void require(bool ok, const Section& s, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(s.where(key) + " " + what);
}

TrainConfig parse_train(Section s, TrainConfig t) {
  t.lr = s.get("lr", t.lr);
  t.epochs = s.get("epochs", t.epochs);
  t.batch_size = s.get("batch_size", t.batch_size);
  require(t.lr > 0.0, s, "lr", "must be positive");
  require(t.epochs >= 1, s, "epochs", "must be >= 1");
  require(t.batch_size >= 1, s, "batch_size", "must be >= 1");
  return t;
}

json train_json(const TrainConfig& t) { return {{"lr", t.lr}, {"epochs", t.epochs}, {"batch_size", t.batch_size}}; }

}  // namespace

RunConfig parse_config(const json& j) {
  RunConfig c;
  Section root(j, "");
  c.experiment_id = root.get<std::string>("experiment_id", c.experiment_id);

  {
    Section d = root.sub("dataset");
    const bool synth = d.has("synthetic"), cifar = d.has("cifar10");
    if (synth == cifar) throw ConfigError("'dataset' needs exactly one of 'synthetic' or 'cifar10'");
    if (synth) {
      Section s = d.sub("synthetic");
      SyntheticSpec spec;
      spec.classes = s.get("classes", spec.classes);
      spec.shape = s.get("shape", spec.shape);
      auto& t = spec.texture;
      t.background = s.get("background", t.background);
      t.texture_amplitude = s.get("texture_amplitude", t.texture_amplitude);
      t.texture_cell = s.get("texture_cell", t.texture_cell);
      t.mark_amplitude = s.get("mark_amplitude", t.mark_amplitude);
      t.mark_size = s.get("mark_size", t.mark_size);
      t.noise_stddev = s.get("noise_stddev", t.noise_stddev);
      require(spec.classes >= 2, s, "classes", "must be >= 2");
      require(spec.shape.size() == 3, s, "shape", "must be [channels, height, width]");
      s.finish();
      c.data.synthetic = spec;
      d.sub("cifar10");
    } else {
      Section s = d.sub("cifar10");
      c.data.cifar10 = s.get<std::string>("path", "");
      require(!c.data.cifar10->empty(), s, "path", "is required");
      s.finish();
      d.sub("synthetic");
    }
    c.data.train_per_class = d.get("train_per_class", c.data.train_per_class);
    c.data.validation_per_class = d.get("validation_per_class", c.data.validation_per_class);
    c.data.test_per_class = d.get("test_per_class", c.data.test_per_class);
    require(c.data.train_per_class >= 2, d, "train_per_class", "must be >= 2");
    require(c.data.test_per_class >= 1, d, "test_per_class", "must be >= 1");
    d.finish();
  }
  {
    Section m = root.sub("model");
    c.model.shape.conv1_channels = m.get("conv1_channels", c.model.shape.conv1_channels);
    c.model.shape.conv2_channels = m.get("conv2_channels", c.model.shape.conv2_channels);
    c.model.shape.kernel = m.get("kernel", c.model.shape.kernel);
    c.model.train = parse_train(m.sub("train"), c.model.train);
    m.finish();
  }
  {
    Section a = root.sub("attack");
    c.attack.kind = parse_attack(a.get<std::string>("name", "fgsm"));
    c.attack.epsilon = a.get("epsilon", c.attack.epsilon);
    require(c.attack.epsilon > 0.0, a, "epsilon", "must be positive");
    Section df = a.sub("deepfool");
    c.attack.deepfool.max_iters = df.get("max_iters", c.attack.deepfool.max_iters);
    c.attack.deepfool.overshoot = df.get("overshoot", c.attack.deepfool.overshoot);
    require(c.attack.deepfool.max_iters >= 1, df, "max_iters", "must be >= 1");
    df.finish();
    Section cw = a.sub("cw");
    auto& w = c.attack.cw;
    w.steps = cw.get("steps", w.steps);
    w.initial_c = cw.get("initial_c", w.initial_c);
    w.binary_search_rounds = cw.get("binary_search_rounds", w.binary_search_rounds);
    w.confidence = cw.get("confidence", w.confidence);
    w.lr = cw.get("lr", w.lr);
    w.abort_early = cw.get("abort_early", w.abort_early);
    require(w.steps >= 1, cw, "steps", "must be >= 1");
    cw.finish();
    Section g = a.sub("gap");
    c.attack.generator.linf_bound = g.get("linf_bound", c.attack.generator.linf_bound);
    c.attack.generator.hidden_channels = g.get("hidden_channels", c.attack.generator.hidden_channels);
    c.attack.generator.kernel = g.get("kernel", c.attack.generator.kernel);
    c.attack.universal.epochs = g.get("epochs", c.attack.universal.epochs);
    c.attack.universal.lr = g.get("lr", c.attack.universal.lr);
    c.attack.universal.batch_size = g.get("batch_size", c.attack.universal.batch_size);
    require(c.attack.generator.linf_bound > 0.0, g, "linf_bound", "must be positive");
    require(c.attack.universal.epochs >= 1, g, "epochs", "must be >= 1");
    g.finish();
    a.finish();
  }
  {
    Section l = root.sub("labeler");
    if (l.has("dim")) c.labeler.dim = l.get<std::size_t>("dim", 0);
    else l.get<std::size_t>("dim", 0);
    c.labeler.k = l.get("k", c.labeler.k);
    c.labeler.fooling_class = l.get("fooling_class", c.labeler.fooling_class);
    require(c.labeler.k >= 1, l, "k", "must be >= 1");
    require(!c.labeler.dim || *c.labeler.dim >= 1, l, "dim", "must be >= 1");
    l.finish();
  }
  {
    Section r = root.sub("retrain");
    c.retrain.fractions = r.get("fractions", c.retrain.fractions);
    c.retrain.counts = r.get("counts", c.retrain.counts);
    c.retrain.label_source = parse_label_source(r.get<std::string>("label_source", "attacker"));
    c.retrain.train = parse_train(r.sub("train"), c.retrain.train);
    c.retrain.from_scratch = r.get("from_scratch", c.retrain.from_scratch);
    if (r.has("pool_per_class")) c.retrain.pool_per_class = r.get<std::size_t>("pool_per_class", 0);
    else r.get<std::size_t>("pool_per_class", 0);
    if (r.has("eval_per_class")) c.retrain.eval_per_class = r.get<std::size_t>("eval_per_class", 0);
    else r.get<std::size_t>("eval_per_class", 0);
    for (double f : c.retrain.fractions) require(f >= 0.0 && f <= 1.0, r, "fractions", "must lie in [0, 1]");
    require(!c.retrain.fractions.empty() || !c.retrain.counts.empty(), r, "fractions", "sweep is empty");
    r.finish();
  }
  {
    Section s = root.sub("seeds");
    c.seeds.data = s.get("data", c.seeds.data);
    c.seeds.model = s.get("model", c.seeds.model);
    c.seeds.attack = s.get("attack", c.seeds.attack);
    s.finish();
  }
  root.finish();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json config_to_json(const RunConfig& c) {
  json data = {{"train_per_class", c.data.train_per_class},
               {"validation_per_class", c.data.validation_per_class},
               {"test_per_class", c.data.test_per_class}};
  if (c.data.synthetic) {
    const auto& s = *c.data.synthetic;
    data["synthetic"] = {{"classes", s.classes},
                         {"shape", s.shape},
                         {"background", s.texture.background},
                         {"texture_amplitude", s.texture.texture_amplitude},
                         {"texture_cell", s.texture.texture_cell},
                         {"mark_amplitude", s.texture.mark_amplitude},
                         {"mark_size", s.texture.mark_size},
                         {"noise_stddev", s.texture.noise_stddev}};
  } else {
    data["cifar10"] = {{"path", c.data.cifar10->string()}};
  }
  const auto& a = c.attack;
  json attack = {
      {"name", attack_name(a.kind)},
      {"epsilon", a.epsilon},
      {"deepfool", {{"max_iters", a.deepfool.max_iters}, {"overshoot", a.deepfool.overshoot}}},
      {"cw",
       {{"steps", a.cw.steps},
        {"initial_c", a.cw.initial_c},
        {"binary_search_rounds", a.cw.binary_search_rounds},
        {"confidence", a.cw.confidence},
        {"lr", a.cw.lr},
        {"abort_early", a.cw.abort_early}}},
      {"gap",
       {{"linf_bound", a.generator.linf_bound},
        {"hidden_channels", a.generator.hidden_channels},
        {"kernel", a.generator.kernel},
        {"epochs", a.universal.epochs},
        {"lr", a.universal.lr},
        {"batch_size", a.universal.batch_size}}},
  };
  json labeler = {{"k", c.labeler.k}, {"fooling_class", c.labeler.fooling_class}, {"dim", nullptr}};
  if (c.labeler.dim) labeler["dim"] = *c.labeler.dim;
  json retrain = {{"fractions", c.retrain.fractions},
                  {"counts", c.retrain.counts},
                  {"label_source", label_source_name(c.retrain.label_source)},
                  {"train", train_json(c.retrain.train)},
                  {"from_scratch", c.retrain.from_scratch},
                  {"pool_per_class", nullptr},
                  {"eval_per_class", nullptr}};
  if (c.retrain.pool_per_class) retrain["pool_per_class"] = *c.retrain.pool_per_class;
  if (c.retrain.eval_per_class) retrain["eval_per_class"] = *c.retrain.eval_per_class;
  return {
      {"experiment_id", c.experiment_id},
      {"dataset", data},
      {"model",
       {{"conv1_channels", c.model.shape.conv1_channels},
        {"conv2_channels", c.model.shape.conv2_channels},
        {"kernel", c.model.shape.kernel},
        {"train", train_json(c.model.train)}}},
      {"attack", attack},
      {"labeler", labeler},
      {"retrain", retrain},
      {"seeds", {{"data", c.seeds.data}, {"model", c.seeds.model}, {"attack", c.seeds.attack}}},
  };
}

}  // namespace advr
