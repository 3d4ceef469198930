#include "dist/episodic.hpp"

#include "dist/metric_ops.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <omp.h>

namespace dist::episodic {

using nlohmann::json;

namespace {

// Unbiased draw in [0, n); does not depend on the standard library's
// distribution algorithms, so episodes are identical across toolchains.
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

// First k entries of a partial Fisher-Yates shuffle.
template <typename T>
std::vector<T> draw(std::vector<T> pool, std::size_t k, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  pool.resize(k);
  return pool;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

int argmax_row(const Mat& m, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return static_cast<int>(best);
}

double accuracy_of(const Mat& logits, std::span<const int> labels) {
  int hit = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    hit += argmax_row(logits, r) == labels[static_cast<std::size_t>(r)];
  return static_cast<double>(hit) / static_cast<double>(logits.rows());
}

}  // namespace

Episode sample_episode(const data::DatasetSplit& split, int way, int shot, int queries,
                       std::mt19937_64& rng) {
  if (way < 1 || shot < 1 || queries < 0) throw ConfigError("sample_episode: invalid M, K or n_q");
  if (static_cast<int>(split.classes.size()) < way)
    throw InsufficientData("split '" + split.name + "' has " + std::to_string(split.classes.size()) +
                           " classes, episode needs " + std::to_string(way));
  const int per_class = (queries + way - 1) / way;
  const std::size_t need = static_cast<std::size_t>(shot + per_class);
  for (const auto& label : split.classes) {
    auto it = split.clips.find(label);
    const std::size_t have = it == split.clips.end() ? 0 : it->second.size();
    if (have < need)
      throw InsufficientData("class '" + label + "' holds " + std::to_string(have) +
                             " clips, episode needs " + std::to_string(need));
  }

  Episode ep;
  ep.class_labels = draw(split.classes, static_cast<std::size_t>(way), rng);
  std::vector<std::vector<std::string>> held(static_cast<std::size_t>(way));
  for (int c = 0; c < way; ++c) {
    const auto& clips = split.clips.at(ep.class_labels[static_cast<std::size_t>(c)]);
    const int nq = queries / way + (c < queries % way ? 1 : 0);
    std::vector<std::string> picked = draw(clips, static_cast<std::size_t>(shot + nq), rng);
    ep.support.emplace_back(picked.begin(), picked.begin() + shot);
    held[static_cast<std::size_t>(c)].assign(picked.begin() + shot, picked.end());
  }
  for (int i = 0; i < queries; ++i) {
    const int c = i % way;
    ep.query.push_back(held[static_cast<std::size_t>(c)][static_cast<std::size_t>(i / way)]);
    ep.query_labels.push_back(c);
  }
  return ep;
}

// ---- model -----------------------------------------------------------------

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.tkc.frames = cfg_.encoder.frames;
  cfg_.validate();
  enc_ = encoders::make_encoders(cfg_.encoder);
  skc = skc::SkcParams::init(cfg_.encoder.dim, cfg_.skc, seed);
  tkc = tkc::TkcParams::init(cfg_.encoder.dim, cfg_.tkc, seed);
}

bool Model::visual_trainable() const {
  return cfg_.encoder.visual_trainable && !enc_.visual->trainable().empty();
}

std::vector<ad::Parameter*> Model::trainable() {
  std::vector<ad::Parameter*> out = skc.all();
  for (ad::Parameter* p : tkc.all()) out.push_back(p);
  if (cfg_.encoder.visual_trainable)
    for (ad::Parameter* p : enc_.visual->trainable()) out.push_back(p);
  return out;
}

std::vector<ad::Parameter*> Model::parameters() { return trainable(); }

ClipFeatures Model::encode(const encoders::VideoClip& clip) const {
  ClipFeatures f;
  encoders::EncodedVideo e = enc_.visual->encode(clip);
  f.frames = std::move(e.frames.values);
  f.patches = std::move(e.patches.frames);
  if (visual_trainable())
    f.raw = static_cast<const encoders::StubVisualEncoder&>(*enc_.visual).pool(clip);
  return f;
}

AttributeTable encode_attributes(const knowledge::KnowledgeBase& kb,
                                 const std::vector<std::string>& labels,
                                 const encoders::TextEncoder& text, int g, int l) {
  AttributeTable out;
  for (const auto& label : labels) {
    if (out.count(label)) continue;
    const knowledge::KnowledgeEntry& e = kb.at(label);
    e.validate(g, l);
    out.emplace(label, knowledge::encode_entry(e, text));
  }
  return out;
}

metrics::ClassPrototypes aggregate_support(std::span<const metrics::ClassPrototypes> shots) {
  if (shots.empty()) throw ShapeError("aggregate_support: no shots");
  if (shots.size() == 1) return shots[0];
  metrics::ClassPrototypes out = shots[0];
  for (std::size_t k = 1; k < shots.size(); ++k) {
    if (shots[k].spatial.rows.rows() != out.spatial.rows.rows() ||
        shots[k].frames.rows() != out.frames.rows())
      throw ShapeError("aggregate_support: shots differ in shape");
    out.spatial.rows += shots[k].spatial.rows;
    out.frames += shots[k].frames;
  }
  const double n = static_cast<double>(shots.size());
  out.spatial.rows /= n;
  out.frames /= n;
  return out;
}

// ---- forward ---------------------------------------------------------------

namespace {

struct Bound {
  skc::SkcVars skc;
  tkc::TkcVars tkc;
};

struct ClipVars {
  std::vector<ad::Var> aggregated;  // T entries of N x C
  ad::Var frames;                   // T x C
};

struct ProtoVars {
  ad::Var spatial;  // (T*N) x C
  ad::Var frames;   // T x C
};

struct AttrVars {
  ad::Var spatial, temporal;
};

ClipVars clip_vars(ad::Graph& g, Model& m, const Bound& b, const ClipFeatures& f) {
  ClipVars cv;
  std::vector<ad::Var> patches;
  if (g.grad_enabled() && m.visual_trainable()) {
    auto& stub = static_cast<encoders::StubVisualEncoder&>(*m.encoders().visual);
    auto out = stub.project(g, f.raw);
    cv.frames = out.frames;
    patches = std::move(out.patches);
  } else {
    cv.frames = g.constant(f.frames);
    for (const Mat& p : f.patches) patches.push_back(g.constant(p));
  }
  cv.aggregated = skc::aggregate_frames(b.skc, patches, m.config().skc);
  return cv;
}

ProtoVars condition(const Bound& b, const ClipVars& cv, const AttrVars* a, const ModelConfig& cfg,
                    Mat* temporal_weights) {
  if (a == nullptr)
    return {skc::stack_frames(cv.aggregated), tkc::temporal_transformer(cv.frames, b.tkc, cfg.tkc)};
  tkc::TkcTrace trace;
  ProtoVars p{skc::inject_frames(b.skc, cv.aggregated, a->spatial, cfg.skc),
              tkc::tkc_forward(cv.frames, a->temporal, b.tkc, cfg.tkc,
                               temporal_weights ? &trace : nullptr)};
  if (temporal_weights) *temporal_weights = trace.attr_weights.value();
  return p;
}

const knowledge::AttributeFeatures& lookup(const AttributeTable& attrs, const std::string& label) {
  auto it = attrs.find(label);
  if (it == attrs.end()) throw KnowledgeMiss("no attribute knowledge for class '" + label + "'");
  return it->second;
}

void check_inputs(const std::vector<std::string>& labels, const EpisodeInputs& in) {
  if (labels.size() < 1 || in.support.size() != labels.size())
    throw ShapeError("episode: one support list per class required");
  const std::size_t k = in.support.front().size();
  for (const auto& shots : in.support)
    if (shots.empty() || shots.size() != k) throw ShapeError("episode: every class needs K clips");
  if (in.query.empty()) throw ShapeError("episode: no queries");
}

// Prototypes of every clip, conditioned as the configuration asks.
struct Conditioned {
  std::vector<std::vector<ProtoVars>> support;  // [c][k], own class knowledge
  std::vector<std::vector<ProtoVars>> query;    // [q][c], candidate class knowledge
};

Conditioned build(ad::Graph& g, Model& model, const std::vector<std::string>& labels,
                  const EpisodeInputs& in, const AttributeTable& attrs, EpisodeTrace* trace) {
  check_inputs(labels, in);
  const ModelConfig& cfg = model.config();
  std::vector<AttrVars> av;
  for (const auto& label : labels) {
    const auto& a = lookup(attrs, label);
    av.push_back({g.constant(a.spatial), g.constant(a.temporal)});
  }
  Bound b{skc::bind(g, model.skc), tkc::bind(g, model.tkc)};
  const std::size_t m = labels.size();

  Conditioned out;
  out.support.resize(m);
  for (std::size_t c = 0; c < m; ++c)
    for (const ClipFeatures* f : in.support[c])
      out.support[c].push_back(condition(b, clip_vars(g, model, b, *f), &av[c], cfg, nullptr));

  if (trace) trace->temporal_weights.assign(in.query.size(), std::vector<Mat>(m));
  for (std::size_t q = 0; q < in.query.size(); ++q) {
    const ClipVars cv = clip_vars(g, model, b, *in.query[q]);
    std::vector<ProtoVars> row;
    if (cfg.conditioning == QueryConditioning::None) {
      row.assign(m, condition(b, cv, nullptr, cfg, nullptr));
    } else {
      for (std::size_t c = 0; c < m; ++c)
        row.push_back(condition(b, cv, &av[c], cfg, trace ? &trace->temporal_weights[q][c] : nullptr));
    }
    out.query.push_back(std::move(row));
  }
  return out;
}

ad::Var pair_distance(const ProtoVars& q, const ProtoVars& s, const ModelConfig& cfg) {
  const metrics::MatchConfig& mc = cfg.match;
  ad::Var ds = ad::bidirectional_min_mean(
      ad::hausdorff_matrix(q.spatial, s.spatial, cfg.skc.prototypes, mc.hausdorff));
  ad::Var d = ad::pairwise_distance(q.frames, s.frames, mc.frame_distance);
  ad::Var dt = mc.temporal == metrics::TemporalMetric::Otam ? ad::otam(d, mc.smooth)
                                                            : ad::bidirectional_min_mean(d);
  return ad::add(dt, ad::scale(ds, mc.alpha));
}

metrics::ClassPrototypes to_values(const ProtoVars& p, const ModelConfig& cfg) {
  return {metrics::SpatialPrototypes(cfg.encoder.frames, cfg.skc.prototypes, p.spatial.value()),
          p.frames.value()};
}

}  // namespace

ad::Var episode_forward(ad::Graph& g, Model& model, const std::vector<std::string>& class_labels,
                        const EpisodeInputs& in, const AttributeTable& attrs) {
  const ModelConfig& cfg = model.config();
  const Conditioned p = build(g, model, class_labels, in, attrs, nullptr);
  const std::size_t m = class_labels.size();

  std::vector<ProtoVars> merged;
  if (cfg.shot_agg == ShotAggregation::MeanPrototypes) {
    for (const auto& shots : p.support) {
      std::vector<ad::Var> sp, fr;
      for (const auto& s : shots) {
        sp.push_back(s.spatial);
        fr.push_back(s.frames);
      }
      merged.push_back({ad::mean_of(sp), ad::mean_of(fr)});
    }
  }

  const double sign = -1.0 / cfg.match.temperature;
  std::vector<ad::Var> rows;
  for (std::size_t q = 0; q < p.query.size(); ++q) {
    std::vector<ad::Var> cells;
    for (std::size_t c = 0; c < m; ++c) {
      ad::Var d;
      if (cfg.shot_agg == ShotAggregation::MeanPrototypes) {
        d = pair_distance(p.query[q][c], merged[c], cfg);
      } else {
        std::vector<ad::Var> per_shot;
        for (const auto& s : p.support[c]) per_shot.push_back(pair_distance(p.query[q][c], s, cfg));
        d = ad::mean_of(per_shot);
      }
      cells.push_back(ad::scale(d, sign));
    }
    rows.push_back(ad::hcat(cells));
  }
  return ad::vcat(rows);
}

ad::Var episode_loss(ad::Var logits, std::span<const int> labels) {
  return ad::cross_entropy(logits, labels);
}

metrics::EpisodeScores score_episode(Model& model, const std::vector<std::string>& class_labels,
                                     const EpisodeInputs& in, const AttributeTable& attrs,
                                     metrics::Exec exec, EpisodeTrace* trace) {
  const ModelConfig& cfg = model.config();
  ad::Graph g(false);
  const Conditioned p = build(g, model, class_labels, in, attrs, trace);
  const std::size_t m = class_labels.size();

  std::vector<std::vector<metrics::ClassPrototypes>> queries;
  for (const auto& row : p.query) {
    std::vector<metrics::ClassPrototypes> r;
    for (const auto& v : row) r.push_back(to_values(v, cfg));
    queries.push_back(std::move(r));
  }
  std::vector<std::vector<metrics::ClassPrototypes>> shots(m);
  for (std::size_t c = 0; c < m; ++c)
    for (const auto& s : p.support[c]) shots[c].push_back(to_values(s, cfg));

  if (cfg.shot_agg == ShotAggregation::MeanPrototypes) {
    std::vector<metrics::ClassPrototypes> support;
    for (const auto& s : shots) support.push_back(aggregate_support(s));
    return metrics::match_episode(queries, support, cfg.match, exec);
  }
  const std::size_t k = shots.front().size();
  metrics::EpisodeScores acc;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<metrics::ClassPrototypes> support;
    for (const auto& s : shots) support.push_back(s[i]);
    metrics::EpisodeScores one = metrics::match_episode(queries, support, cfg.match, exec);
    if (i == 0) {
      acc = std::move(one);
      continue;
    }
    acc.spatial += one.spatial;
    acc.temporal += one.temporal;
    acc.fused += one.fused;
  }
  const double n = static_cast<double>(k);
  acc.spatial /= n;
  acc.temporal /= n;
  acc.fused /= n;
  acc.logits = -acc.fused / cfg.match.temperature;
  return acc;
}

ClipFeatures prepare_clip(const Model& model, const data::Dataset& dataset,
                          const std::string& clip_id, bool train, const TrainConfig& cfg,
                          std::mt19937_64* rng) {
  if (!dataset.source) throw DataError("dataset has no video source");
  const data::Video video = dataset.source->load(clip_id);
  const data::SamplingPolicy policy{model.config().encoder.frames,
                                    train ? data::SamplingMode::TrainRandomPerSegment
                                          : data::SamplingMode::EvalCenterPerSegment};
  encoders::VideoClip clip = data::sample_frames(video, policy, train ? rng : nullptr, -1, clip_id);
  const bool random = train && cfg.augment_enabled;
  clip = data::augment(clip, random ? data::AugmentMode::Train : data::AugmentMode::Eval,
                       cfg.augment, random ? rng : nullptr);
  return model.encode(clip);
}

// ---- optimisation ------------------------------------------------------------

Adam::Adam(std::vector<ad::Parameter*> params, const OptimizerConfig& cfg, double lr)
    : params_(std::move(params)), cfg_(cfg), lr_(lr) {
  for (ad::Parameter* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    p->zero_grad();
  }
}

void Adam::zero_grad() {
  for (ad::Parameter* p : params_) p->zero_grad();
}

double Adam::step() {
  double sq = 0.0;
  for (ad::Parameter* p : params_)
    if (p->grad.size() != 0) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  ++step_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Parameter& p = *params_[i];
    if (p.grad.size() == 0) p.zero_grad();
    Mat g = p.grad * clip;
    if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * p.value;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
  return norm;
}

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (double m : cfg.optimizer.milestones)
    if (epoch >= static_cast<int>(std::ceil(m * cfg.epochs - 1e-9))) lr *= cfg.optimizer.gamma;
  return lr;
}

namespace {

// Eigen may spawn its own OpenMP team for large products; training keeps to
// one thread so results do not depend on the machine.
class SingleThreadedEigen {
 public:
  SingleThreadedEigen() : saved_(Eigen::nbThreads()) { Eigen::setNbThreads(1); }
  ~SingleThreadedEigen() { Eigen::setNbThreads(saved_); }

 private:
  int saved_;
};

std::string describe_params(const std::vector<ad::Parameter*>& params) {
  std::ostringstream os;
  for (const ad::Parameter* p : params) {
    os << "  " << p->name << ": |w|=" << p->value.norm();
    if (p->grad.size()) os << " |g|=" << p->grad.norm();
    os << (p->value.allFinite() ? "" : " (non-finite)") << "\n";
  }
  return os.str();
}

}  // namespace

TrainResult train(Model& model, const TrainConfig& cfg, const data::Dataset& dataset,
                  const AttributeTable& attrs, const std::function<void(const EpisodeLog&)>& progress) {
  cfg.validate();
  SingleThreadedEigen single;
  const data::DatasetSplit& split = dataset.manifest.split("train");
  for (const auto& label : split.classes) lookup(attrs, label);

  std::mt19937_64 rng(cfg.seed);
  Adam opt(model.trainable(), cfg.optimizer, cfg.lr);
  TrainResult result;
  int index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(scheduled_lr(cfg, epoch));
    for (int e = 0; e < cfg.episodes_per_epoch; ++e, ++index) {
      const Episode ep = sample_episode(split, cfg.way, cfg.shot, cfg.train_queries, rng);
      std::vector<std::vector<ClipFeatures>> support(ep.support.size());
      for (std::size_t c = 0; c < ep.support.size(); ++c)
        for (const auto& id : ep.support[c])
          support[c].push_back(prepare_clip(model, dataset, id, true, cfg, &rng));
      std::vector<ClipFeatures> query;
      for (const auto& id : ep.query) query.push_back(prepare_clip(model, dataset, id, true, cfg, &rng));

      EpisodeInputs in;
      for (const auto& shots : support) {
        in.support.emplace_back();
        for (const auto& f : shots) in.support.back().push_back(&f);
      }
      for (const auto& f : query) in.query.push_back(&f);

      ad::Graph g;
      ad::Var logits = episode_forward(g, model, ep.class_labels, in, attrs);
      ad::Var loss = episode_loss(logits, ep.query_labels);
      const double value = loss.scalar();
      if (!std::isfinite(value))
        throw NumericalAbort("training loss became non-finite at episode " + std::to_string(index) +
                             "\n" + describe_params(model.trainable()));
      opt.zero_grad();
      g.backward(loss);
      const double norm = opt.step();
      if (!std::isfinite(norm))
        throw NumericalAbort("non-finite gradient at episode " + std::to_string(index) + "\n" +
                             describe_params(model.trainable()));

      EpisodeLog log{index, value, accuracy_of(logits.value(), ep.query_labels), opt.lr()};
      result.log.push_back(log);
      if (progress) progress(log);
    }
  }
  std::ostringstream os;
  os << rng;
  result.rng_state = os.str();
  return result;
}

std::string loss_csv(const std::vector<EpisodeLog>& log) {
  std::string out = "episode,loss,accuracy,lr\n";
  for (const auto& l : log)
    out += std::to_string(l.episode) + "," + fmt(l.loss) + "," + fmt(l.accuracy) + "," + fmt(l.lr) + "\n";
  return out;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;

json fingerprint_json(const knowledge::Fingerprint& f) {
  return {{"G", f.spatial_count},
          {"L", f.temporal_count},
          {"model_id", f.model_id},
          {"spatial_template_version", f.spatial_template_version},
          {"temporal_template_version", f.temporal_template_version}};
}

knowledge::Fingerprint fingerprint_from(const json& j) {
  knowledge::Fingerprint f;
  f.spatial_count = j.at("G").get<int>();
  f.temporal_count = j.at("L").get<int>();
  f.model_id = j.at("model_id").get<std::string>();
  f.spatial_template_version = j.at("spatial_template_version").get<int>();
  f.temporal_template_version = j.at("temporal_template_version").get<int>();
  return f;
}

void put_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, Model& model, const TrainConfig& cfg,
                     const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  std::string blob;
  json tensors = json::array();
  for (const ad::Parameter* p : model.parameters()) {
    tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) put_le(blob, p->value(r, c));
  }
  json j = {{"format", "dist-checkpoint"},
            {"version", kCheckpointVersion},
            {"config", json::parse(config_to_json(cfg))},
            {"model_fingerprint", model_fingerprint(model.config())},
            {"kb_fingerprint", fingerprint_json(meta.kb)},
            {"dataset_hash", meta.dataset_hash},
            {"rng_state", meta.rng_state},
            {"episodes_trained", meta.episodes_trained},
            {"tensors", tensors},
            {"blob", "params.bin"},
            {"blob_hash", hex64(fnv1a64(blob))}};
  write_file(dir / "params.bin", blob);
  write_file(dir / "manifest.json", j.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  json j;
  try {
    j = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw SchemaError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  LoadedCheckpoint out;
  std::string blob;
  try {
    if (j.at("format") != "dist-checkpoint") throw SchemaError("not a checkpoint manifest");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw SchemaError("unsupported checkpoint version");
    out.config = config_from_json(j.at("config").dump());
    if (j.at("model_fingerprint").get<std::string>() != model_fingerprint(out.config.model))
      throw FingerprintMismatch("checkpoint model fingerprint does not match its config");
    out.meta.kb = fingerprint_from(j.at("kb_fingerprint"));
    out.meta.dataset_hash = j.at("dataset_hash").get<std::string>();
    out.meta.rng_state = j.at("rng_state").get<std::string>();
    out.meta.episodes_trained = j.at("episodes_trained").get<int>();
    blob = read_file(dir / j.at("blob").get<std::string>());
    if (hex64(fnv1a64(blob)) != j.at("blob_hash").get<std::string>())
      throw SchemaError("checkpoint parameter blob is corrupt");

    out.model = std::make_unique<Model>(out.config.model, out.config.seed);
    std::map<std::string, ad::Parameter*> by_name;
    for (ad::Parameter* p : out.model->parameters()) by_name[p->name] = p;
    std::size_t offset = 0;
    std::set<std::string> loaded;
    for (const json& t : j.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw SchemaError("checkpoint holds unknown tensor " + name);
      ad::Parameter& p = *it->second;
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      if (rows != p.value.rows() || cols != p.value.cols())
        throw SchemaError("checkpoint tensor " + name + " has the wrong shape");
      if (offset + static_cast<std::size_t>(rows * cols) * 8 > blob.size())
        throw SchemaError("checkpoint parameter blob is truncated");
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c, offset += 8) p.value(r, c) = get_le(blob.data() + offset);
      loaded.insert(name);
    }
    if (offset != blob.size()) throw SchemaError("checkpoint parameter blob has trailing bytes");
    if (loaded.size() != by_name.size()) throw SchemaError("checkpoint is missing tensors");
  } catch (const json::exception& e) {
    throw SchemaError(std::string("checkpoint manifest schema violation: ") + e.what());
  }
  return out;
}

// ---- evaluation --------------------------------------------------------------

FeatureBank::FeatureBank(const Model& model, const data::Dataset& dataset,
                         const data::DatasetSplit& split, const TrainConfig& cfg, int workers) {
  std::vector<std::string> ids;
  for (const auto& label : split.classes) {
    auto it = split.clips.find(label);
    if (it == split.clips.end()) throw MissingClips("class '" + label + "' lists no clips");
    ids.insert(ids.end(), it->second.begin(), it->second.end());
  }
  std::vector<ClipFeatures> feats(ids.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, workers))
  for (std::size_t i = 0; i < ids.size(); ++i) {
    try {
      feats[i] = prepare_clip(model, dataset, ids[i], false, cfg, nullptr);
    } catch (...) {
#pragma omp critical(dist_bank_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  for (std::size_t i = 0; i < ids.size(); ++i) features_.emplace(ids[i], std::move(feats[i]));
}

const ClipFeatures& FeatureBank::at(const std::string& clip_id) const {
  auto it = features_.find(clip_id);
  if (it == features_.end()) throw MissingClips("clip '" + clip_id + "' is not in the feature bank");
  return it->second;
}

EpisodeInputs gather(const Episode& ep, const FeatureBank& bank) {
  EpisodeInputs in;
  for (const auto& shots : ep.support) {
    in.support.emplace_back();
    for (const auto& id : shots) in.support.back().push_back(&bank.at(id));
  }
  for (const auto& id : ep.query) in.query.push_back(&bank.at(id));
  return in;
}

Mat ModelScorer::logits(const Episode& ep, const EpisodeInputs& in, std::uint64_t) const {
  return score_episode(model_, ep.class_labels, in, attrs_).logits;
}

Mat OracleScorer::logits(const Episode& ep, const EpisodeInputs&, std::uint64_t) const {
  Mat out = Mat::Zero(static_cast<Eigen::Index>(ep.query.size()),
                      static_cast<Eigen::Index>(ep.class_labels.size()));
  for (std::size_t q = 0; q < ep.query.size(); ++q)
    out(static_cast<Eigen::Index>(q), ep.query_labels[q]) = 1.0;
  return out;
}

Mat RandomScorer::logits(const Episode& ep, const EpisodeInputs&, std::uint64_t stream) const {
  CounterRng rng(stream);
  Mat out(static_cast<Eigen::Index>(ep.query.size()), static_cast<Eigen::Index>(ep.class_labels.size()));
  for (Eigen::Index q = 0; q < out.rows(); ++q)
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(q, c) = rng.uniform();
  return out;
}

Mat FrameMeanScorer::logits(const Episode& ep, const EpisodeInputs& in, std::uint64_t) const {
  std::vector<RowVec> centers;
  for (const auto& shots : in.support) {
    RowVec acc = shots.front()->frames.colwise().mean();
    for (std::size_t k = 1; k < shots.size(); ++k) acc += shots[k]->frames.colwise().mean();
    centers.push_back(acc / static_cast<double>(shots.size()));
  }
  Mat out(static_cast<Eigen::Index>(in.query.size()), static_cast<Eigen::Index>(centers.size()));
  for (std::size_t q = 0; q < in.query.size(); ++q) {
    const RowVec v = in.query[q]->frames.colwise().mean();
    for (std::size_t c = 0; c < centers.size(); ++c)
      out(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(c)) =
          1.0 - metrics::cosine_distance(v, centers[c]);
  }
  (void)ep;
  return out;
}

std::uint64_t episode_stream(std::uint64_t seed, std::uint64_t index) {
  return CounterRng::mix(CounterRng::mix(seed) ^ (index + 1));
}

std::pair<double, double> mean_ci95(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return {mean, 1.96 * sd / std::sqrt(static_cast<double>(xs.size()))};
}

EvalReport evaluate(const Scorer& scorer, const FeatureBank& bank, const data::DatasetSplit& split,
                    const EvalOptions& opts) {
  if (opts.episodes < 1) throw ConfigError("evaluation needs at least one episode");
  EvalReport rep;
  rep.scorer = scorer.name();
  rep.n_episodes = opts.episodes;
  rep.way = opts.way;
  rep.shot = opts.shot;
  rep.queries = opts.queries;
  rep.seed = opts.seed;
  rep.per_episode.assign(static_cast<std::size_t>(opts.episodes), 0.0);

  // Surface sampling errors on the calling thread before fanning out.
  {
    std::mt19937_64 probe(episode_stream(opts.seed, 0));
    sample_episode(split, opts.way, opts.shot, opts.queries, probe);
  }
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, opts.workers))
  for (int i = 0; i < opts.episodes; ++i) {
    try {
      const std::uint64_t stream = episode_stream(opts.seed, static_cast<std::uint64_t>(i));
      std::mt19937_64 rng(stream);
      const Episode ep = sample_episode(split, opts.way, opts.shot, opts.queries, rng);
      const Mat logits = scorer.logits(ep, gather(ep, bank), CounterRng::mix(stream));
      rep.per_episode[static_cast<std::size_t>(i)] = accuracy_of(logits, ep.query_labels);
    } catch (...) {
#pragma omp critical(dist_eval_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  std::tie(rep.accuracy, rep.ci95) = mean_ci95(rep.per_episode);
  return rep;
}

std::string EvalReport::to_json() const {
  json j = {{"scorer", scorer},     {"n_episodes", n_episodes}, {"M", way},
            {"K", shot},            {"n_q", queries},           {"seed", seed},
            {"accuracy", accuracy}, {"ci95", ci95},             {"per_episode", per_episode},
            {"fingerprint", fingerprint}};
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::string out = "episode,accuracy\n";
  for (std::size_t i = 0; i < per_episode.size(); ++i)
    out += std::to_string(i) + "," + fmt(per_episode[i]) + "\n";
  return out;
}

}  // namespace dist::episodic
