#include "dist/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace dist {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and complains about the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key: " + path_ + it.key());
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key " + path_ + key + " has the wrong type");
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return path_ + key + "."; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E>
E pick(const std::string& value, std::initializer_list<std::pair<const char*, E>> options,
       const char* key) {
  for (const auto& [name, e] : options)
    if (value == name) return e;
  throw ConfigError(std::string("invalid value for ") + key + ": " + value);
}

}  // namespace

std::string_view to_string(metrics::TemporalMetric m) {
  return m == metrics::TemporalMetric::Otam ? "otam" : "bi_mhm";
}

std::string_view to_string(metrics::DistanceKind d) {
  return d == metrics::DistanceKind::Cosine ? "cosine" : "euclidean";
}

metrics::TemporalMetric parse_temporal_metric(std::string_view s) {
  return pick<metrics::TemporalMetric>(
      std::string(s), {{"otam", metrics::TemporalMetric::Otam}, {"bi_mhm", metrics::TemporalMetric::BiMhm}},
      "metric.temporal");
}

void ModelConfig::validate() const {
  encoder.validate();
  if (spatial_count < 1) throw ConfigError("knowledge.G must be >= 1");
  if (temporal_count < 1) throw ConfigError("knowledge.L must be >= 1");
  skc.validate(encoder.dim);
  tkc.validate(encoder.dim);
  if (tkc.frames != encoder.frames) throw ConfigError("tkc frame count must equal encoder.frames");
  if (!(match.temperature > 0.0)) throw ConfigError("metric.temperature must be > 0");
  if (!(match.alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  match.smooth.validate();
}

void TrainConfig::validate() const {
  if (way < 2) throw ConfigError("M must be >= 2");
  if (shot < 1) throw ConfigError("K must be >= 1");
  if (train_queries < 1 || eval_queries < 1) throw ConfigError("n_q must be >= 1");
  if (episodes_per_epoch < 1 || epochs < 1) throw ConfigError("episode budget must be positive");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 || optimizer.beta2 >= 1)
    throw ConfigError("optimizer betas must lie in [0, 1)");
  if (!(optimizer.gamma > 0.0)) throw ConfigError("optimizer.gamma must be > 0");
  for (double m : optimizer.milestones)
    if (m <= 0.0 || m >= 1.0) throw ConfigError("optimizer milestones must lie in (0, 1)");
  if (augment.crop_area <= 0.0 || augment.crop_area > 1.0)
    throw ConfigError("augment.crop_area must lie in (0, 1]");
  model.validate();
}

TrainConfig config_from_json(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  ModelConfig& m = c.model;
  {
    Section s(root, "");
    s.get("M", c.way);
    s.get("K", c.shot);
    s.get("n_q", c.train_queries);
    s.get("eval_n_q", c.eval_queries);
    s.get("episodes_per_epoch", c.episodes_per_epoch);
    s.get("epochs", c.epochs);
    s.get("eval_episodes", c.eval_episodes);
    s.get("lr", c.lr);
    s.get("seed", c.seed);
    s.get("alpha", m.match.alpha);

    if (const json* o = s.sub("optimizer")) {
      Section t(*o, s.path("optimizer"));
      std::string name = "adam";
      t.get("name", name);
      if (name != "adam") throw ConfigError("optimizer.name: only adam is supported");
      t.get("beta1", c.optimizer.beta1);
      t.get("beta2", c.optimizer.beta2);
      t.get("eps", c.optimizer.eps);
      t.get("weight_decay", c.optimizer.weight_decay);
      t.get("milestones", c.optimizer.milestones);
      t.get("gamma", c.optimizer.gamma);
      t.get("grad_clip", c.optimizer.grad_clip);
    }
    if (const json* o = s.sub("augment")) {
      Section t(*o, s.path("augment"));
      t.get("enabled", c.augment_enabled);
      t.get("crop_area", c.augment.crop_area);
      t.get("jitter", c.augment.jitter);
      t.get("flip_probability", c.augment.flip_probability);
    }
    if (const json* o = s.sub("encoder")) {
      Section t(*o, s.path("encoder"));
      t.get("backend", m.encoder.backend);
      t.get("weights", m.encoder.weights_path);
      t.get("frames", m.encoder.frames);
      t.get("patches", m.encoder.patches);
      t.get("dim", m.encoder.dim);
      t.get("visual_trainable", m.encoder.visual_trainable);
      t.get("seed", m.encoder.seed);
      std::string mode = "projection";
      t.get("stub_mode", mode);
      m.encoder.stub_mode = pick<encoders::StubVisualMode>(
          mode, {{"projection", encoders::StubVisualMode::Projection},
                 {"hash", encoders::StubVisualMode::Hash}},
          "encoder.stub_mode");
    }
    if (const json* o = s.sub("knowledge")) {
      Section t(*o, s.path("knowledge"));
      t.get("G", m.spatial_count);
      t.get("L", m.temporal_count);
    }
    if (const json* o = s.sub("skc")) {
      Section t(*o, s.path("skc"));
      t.get("num_prototypes", m.skc.prototypes);
      t.get("heads", m.skc.heads);
      t.get("literal_unscaled", m.skc.literal_unscaled);
      t.get("prototype_init_std", m.skc.prototype_init_std);
      std::string cond = "candidate_class";
      t.get("query_conditioning", cond);
      m.conditioning = pick<QueryConditioning>(
          cond, {{"candidate_class", QueryConditioning::CandidateClass},
                 {"none", QueryConditioning::None}},
          "skc.query_conditioning");
    }
    if (const json* o = s.sub("tkc")) {
      Section t(*o, s.path("tkc"));
      t.get("heads", m.tkc.heads);
      t.get("blocks", m.tkc.blocks);
      t.get("ffn_mult", m.tkc.ffn_mult);
      t.get("literal_unscaled", m.tkc.literal_unscaled);
      t.get("position_init_std", m.tkc.position_init_std);
      t.get("residual_init_std", m.tkc.residual_init_std);
      std::string pool = "mean";
      t.get("pool", pool);
      m.tkc.pool = pick<tkc::Pool>(pool, {{"mean", tkc::Pool::Mean}, {"max", tkc::Pool::Max}},
                                   "tkc.pool");
    }
    if (const json* o = s.sub("metric")) {
      Section t(*o, s.path("metric"));
      std::string temporal = "otam";
      t.get("temporal", temporal);
      m.match.temporal = parse_temporal_metric(temporal);
      t.get("lambda", m.match.smooth.lambda);
      t.get("hard", m.match.smooth.hard);
      bool literal = false;
      t.get("literal_alg1", literal);
      m.match.hausdorff.normalize = !literal;
      std::string dist = "cosine";
      t.get("distance", dist);
      m.match.hausdorff.distance = pick<metrics::DistanceKind>(
          dist, {{"cosine", metrics::DistanceKind::Cosine},
                 {"euclidean", metrics::DistanceKind::Euclidean}},
          "metric.distance");
      m.match.frame_distance = m.match.hausdorff.distance;
      t.get("temperature", m.match.temperature);
    }
    if (const json* o = s.sub("episodic")) {
      Section t(*o, s.path("episodic"));
      std::string agg = "mean_prototypes";
      t.get("shot_agg", agg);
      m.shot_agg = pick<ShotAggregation>(agg, {{"mean_prototypes", ShotAggregation::MeanPrototypes},
                                               {"mean_scores", ShotAggregation::MeanScores}},
                                         "episodic.shot_agg");
    }
  }
  m.tkc.frames = m.encoder.frames;
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

namespace {

json model_json(const ModelConfig& m) {
  json enc = {{"backend", m.encoder.backend},
              {"weights", m.encoder.weights_path},
              {"frames", m.encoder.frames},
              {"patches", m.encoder.patches},
              {"dim", m.encoder.dim},
              {"visual_trainable", m.encoder.visual_trainable},
              {"seed", m.encoder.seed},
              {"stub_mode", m.encoder.stub_mode == encoders::StubVisualMode::Hash ? "hash"
                                                                                   : "projection"}};
  json skc = {{"num_prototypes", m.skc.prototypes},
              {"heads", m.skc.heads},
              {"literal_unscaled", m.skc.literal_unscaled},
              {"prototype_init_std", m.skc.prototype_init_std},
              {"query_conditioning",
               m.conditioning == QueryConditioning::CandidateClass ? "candidate_class" : "none"}};
  json tkc = {{"heads", m.tkc.heads},
              {"blocks", m.tkc.blocks},
              {"ffn_mult", m.tkc.ffn_mult},
              {"literal_unscaled", m.tkc.literal_unscaled},
              {"position_init_std", m.tkc.position_init_std},
              {"residual_init_std", m.tkc.residual_init_std},
              {"pool", m.tkc.pool == tkc::Pool::Mean ? "mean" : "max"}};
  json metric = {{"temporal", to_string(m.match.temporal)},
                 {"lambda", m.match.smooth.lambda},
                 {"hard", m.match.smooth.hard},
                 {"literal_alg1", !m.match.hausdorff.normalize},
                 {"distance", to_string(m.match.hausdorff.distance)},
                 {"temperature", m.match.temperature}};
  json episodic = {{"shot_agg", m.shot_agg == ShotAggregation::MeanPrototypes ? "mean_prototypes"
                                                                              : "mean_scores"}};
  return {{"encoder", enc},
          {"knowledge", {{"G", m.spatial_count}, {"L", m.temporal_count}}},
          {"skc", skc},
          {"tkc", tkc},
          {"metric", metric},
          {"episodic", episodic}};
}

}  // namespace

std::string config_to_json(const TrainConfig& c, int indent) {
  json j = model_json(c.model);
  j["M"] = c.way;
  j["K"] = c.shot;
  j["n_q"] = c.train_queries;
  j["eval_n_q"] = c.eval_queries;
  j["episodes_per_epoch"] = c.episodes_per_epoch;
  j["epochs"] = c.epochs;
  j["eval_episodes"] = c.eval_episodes;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["alpha"] = c.model.match.alpha;
  j["optimizer"] = {{"name", "adam"},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"milestones", c.optimizer.milestones},
                    {"gamma", c.optimizer.gamma},
                    {"grad_clip", c.optimizer.grad_clip}};
  j["augment"] = {{"enabled", c.augment_enabled},
                  {"crop_area", c.augment.crop_area},
                  {"jitter", c.augment.jitter},
                  {"flip_probability", c.augment.flip_probability}};
  return j.dump(indent);
}

std::string model_fingerprint(const ModelConfig& cfg) {
  json j = model_json(cfg);
  // Scoring-only knobs may differ between training and evaluation.
  j.erase("metric");
  j["episodic"].erase("shot_agg");
  return hex64(fnv1a64(j.dump()));
}

}  // namespace dist
