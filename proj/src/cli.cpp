#include "dist/cli.hpp"

#include "dist/episodic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <limits>
#include <iostream>
#include <sstream>

namespace dist::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("short write to " + p.string());
  }
  fs::rename(tmp, p);
}

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string utc_now() { return knowledge::utc_timestamp(); }

// One entry of <out>/manifest.json. Earlier runs into the same directory are kept.
class RunRecord {
 public:
  RunRecord(std::string command, const std::vector<std::string>& args)
      : command_(std::move(command)), args_(args), started_(utc_now()),
        t0_(std::chrono::steady_clock::now()) {}

  void artifact(const fs::path& out_dir, const fs::path& p) {
    artifacts_.push_back(fs::relative(p, out_dir).generic_string());
  }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }
  void timing(const std::string& phase, double seconds) { timings_[phase] = seconds; }

  void write(const fs::path& out_dir) {
    const fs::path path = out_dir / "manifest.json";
    json doc = {{"runs", json::array()}};
    if (fs::exists(path)) {
      try {
        doc = json::parse(read_text(path));
        if (!doc.contains("runs") || !doc["runs"].is_array()) doc = {{"runs", json::array()}};
      } catch (const json::exception&) {
        doc = {{"runs", json::array()}};
      }
    }
    timings_["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    json run = {{"command", command_}, {"args", args_},         {"started", started_},
                {"output_dir", fs::absolute(out_dir).lexically_normal().string()},
                {"artifacts", artifacts_}, {"timings", timings_}};
    for (auto& [k, v] : extra_.items()) run[k] = v;
    run["artifacts"].push_back("manifest.json");
    doc["runs"].push_back(run);
    write_text(path, doc.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  std::string started_;
  std::chrono::steady_clock::time_point t0_;
  std::vector<std::string> artifacts_;
  json extra_ = json::object();
  json timings_ = json::object();
};

std::vector<std::string> read_labels(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
      line.pop_back();
    std::size_t s = line.find_first_not_of(" \t");
    if (s == std::string::npos || line[s] == '#') continue;
    labels.push_back(line.substr(s));
  }
  if (labels.empty()) throw DataError("labels file " + p.string() + " lists no labels");
  return labels;
}

std::vector<std::string> all_labels(const data::Manifest& m) {
  std::vector<std::string> out;
  for (const auto& [name, split] : m.splits)
    out.insert(out.end(), split.classes.begin(), split.classes.end());
  return out;
}

std::string kb_hash(const knowledge::KnowledgeBase& kb) {
  return hex64(fnv1a64(knowledge::to_json_text(kb)));
}

knowledge::Fingerprint expected_fingerprint(const ModelConfig& m) {
  knowledge::Fingerprint f;
  f.spatial_count = m.spatial_count;
  f.temporal_count = m.temporal_count;
  return f;
}

std::unique_ptr<knowledge::LlmClient> make_client(const std::string& fixture) {
  if (!fixture.empty()) return knowledge::FixtureClient::from_file(fixture);
  return knowledge::HttpChatClient::from_environment();
}

// KB for the given counts: an explicit file, the synthetic fixture, or a
// fresh build through the fixture/live client.
knowledge::KnowledgeBase obtain_kb(const ModelConfig& m, const std::string& kb_path,
                                   const std::string& fixture, const data::Dataset& ds,
                                   std::ostream& err) {
  if (!kb_path.empty()) return knowledge::load_kb(kb_path, expected_fingerprint(m), false);
  if (ds.synthetic && fixture.empty()) return ds.synthetic->fixture_kb(m.spatial_count, m.temporal_count);
  auto client = make_client(fixture);
  knowledge::KnowledgeBase kb;
  kb.fingerprint = expected_fingerprint(m);
  kb.fingerprint.model_id = client->model_id();
  knowledge::BuildOptions opts;
  opts.generation.spatial_count = m.spatial_count;
  opts.generation.temporal_count = m.temporal_count;
  const auto rep = knowledge::build_knowledge(kb, *client, all_labels(ds.manifest), opts);
  if (!rep.complete()) {
    for (const auto& [label, why] : rep.failures) err << "knowledge: " << label << ": " << why << "\n";
    throw KnowledgeMiss("knowledge generation failed for " + std::to_string(rep.failures.size()) +
                        " label(s)");
  }
  return kb;
}

// Accepts either an output directory holding checkpoint/ or the checkpoint itself.
fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "manifest.json") && fs::exists(p / "params.bin")) return p;
  if (fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
  throw IoError("no checkpoint found at " + p.string());
}

fs::path default_out_for(const fs::path& ckpt) {
  const fs::path abs = fs::absolute(ckpt).lexically_normal();
  fs::path dir = abs.filename().empty() ? abs.parent_path() : abs;
  return dir.filename() == "checkpoint" ? dir.parent_path() : dir;
}

struct TrainOutcome {
  episodic::TrainResult result;
  fs::path checkpoint;
  double seconds = 0.0;
};

TrainOutcome train_into(const TrainConfig& cfg, const data::Dataset& ds,
                        const knowledge::KnowledgeBase& kb, const fs::path& out_dir, bool quiet,
                        std::ostream& err, RunRecord* rec) {
  const auto t0 = std::chrono::steady_clock::now();
  episodic::Model model(cfg.model, cfg.seed);
  if (!kb.fingerprint.compatible_with(expected_fingerprint(cfg.model)))
    throw FingerprintMismatch("knowledge base " + kb.fingerprint.describe() +
                              " does not match the config (G=" + std::to_string(cfg.model.spatial_count) +
                              ", L=" + std::to_string(cfg.model.temporal_count) + ")");
  // Fail before the first episode when a training class lacks knowledge.
  const auto attrs = episodic::encode_attributes(kb, ds.manifest.split("train").classes,
                                                 *model.encoders().text, cfg.model.spatial_count,
                                                 cfg.model.temporal_count);
  double window = 0.0;
  auto res = episodic::train(model, cfg, ds, attrs, [&](const episodic::EpisodeLog& l) {
    window += l.loss;
    if (!quiet && (l.episode + 1) % 50 == 0) {
      err << "episode " << (l.episode + 1) << "/" << cfg.total_episodes() << "  loss(50) "
          << fmt(window / 50.0) << "\n";
      window = 0.0;
    }
  });
  TrainOutcome o;
  o.checkpoint = out_dir / "checkpoint";
  episodic::CheckpointMeta meta{kb.fingerprint, ds.content_hash, res.rng_state,
                                cfg.total_episodes()};
  episodic::save_checkpoint(o.checkpoint, model, cfg, meta);
  knowledge::save_kb(kb, o.checkpoint / "kb.json");
  const fs::path loss = out_dir / "reports" / "loss.csv";
  write_text(loss, episodic::loss_csv(res.log));
  if (rec) {
    rec->artifact(out_dir, o.checkpoint / "manifest.json");
    rec->artifact(out_dir, o.checkpoint / "params.bin");
    rec->artifact(out_dir, o.checkpoint / "kb.json");
    rec->artifact(out_dir, loss);
  }
  o.result = std::move(res);
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

struct EvalArgs {
  std::string split = "test";
  int episodes = 0;  // 0: the config's eval_episodes
  std::uint64_t seed = 1;
  int workers = 1;
  int way = 0, shot = 0, queries = 0;  // 0: from the config
  std::string scorer = "model";
};

episodic::EvalReport eval_model(episodic::Model& model, const TrainConfig& cfg,
                                const knowledge::KnowledgeBase& kb, const data::Dataset& ds,
                                const EvalArgs& a) {
  const data::DatasetSplit& split = ds.manifest.split(a.split);
  episodic::EvalOptions opts;
  opts.episodes = a.episodes > 0 ? a.episodes : cfg.eval_episodes;
  opts.way = a.way > 0 ? a.way : cfg.way;
  opts.shot = a.shot > 0 ? a.shot : cfg.shot;
  opts.queries = a.queries > 0 ? a.queries : cfg.eval_queries;
  opts.seed = a.seed;
  opts.workers = a.workers;
  episodic::FeatureBank bank(model, ds, split, cfg, a.workers);
  episodic::EvalReport rep;
  if (a.scorer == "model") {
    const auto attrs = episodic::encode_attributes(kb, split.classes, *model.encoders().text,
                                                   cfg.model.spatial_count, cfg.model.temporal_count);
    rep = episodic::evaluate(episodic::ModelScorer(model, attrs), bank, split, opts);
  } else if (a.scorer == "oracle") {
    rep = episodic::evaluate(episodic::OracleScorer(), bank, split, opts);
  } else if (a.scorer == "random") {
    rep = episodic::evaluate(episodic::RandomScorer(), bank, split, opts);
  } else if (a.scorer == "frame_mean") {
    rep = episodic::evaluate(episodic::FrameMeanScorer(), bank, split, opts);
  } else {
    throw ConfigError("unknown scorer " + a.scorer);
  }
  rep.fingerprint = model_fingerprint(cfg.model);
  return rep;
}

std::string summary(const episodic::EvalReport& r) {
  return r.scorer + " accuracy " + fmt(r.accuracy) + " +- " + fmt(r.ci95) + " (95% CI, " +
         std::to_string(r.n_episodes) + " episodes, " + std::to_string(r.way) + "-way " +
         std::to_string(r.shot) + "-shot)";
}

// ---- commands ------------------------------------------------------------------

struct KnowledgeArgs {
  std::string labels, out, fixture;
  int g = 6, l = 3, inflight = 4, retries = 2;
};

int cmd_knowledge(const KnowledgeArgs& a, const std::vector<std::string>& argv, std::ostream& out,
                  std::ostream& err) {
  RunRecord rec("knowledge-build", argv);
  const auto labels = read_labels(a.labels);
  auto client = make_client(a.fixture);
  knowledge::Fingerprint want;
  want.spatial_count = a.g;
  want.temporal_count = a.l;
  want.model_id = client->model_id();
  knowledge::KnowledgeBase kb;
  kb.fingerprint = want;
  if (fs::exists(a.out)) kb = knowledge::load_kb(a.out, want, false);

  knowledge::BuildOptions opts;
  opts.generation.spatial_count = a.g;
  opts.generation.temporal_count = a.l;
  opts.generation.max_retries = a.retries;
  opts.max_inflight = a.inflight;
  const auto rep = knowledge::build_knowledge(kb, *client, labels, opts);
  knowledge::save_kb(kb, a.out);

  const fs::path out_dir = fs::absolute(a.out).parent_path();
  rec.artifact(out_dir, fs::absolute(a.out));
  rec.set("kb_hash", kb_hash(kb));
  rec.set("client_calls", rep.client_calls);
  rec.set("generated", rep.generated);
  rec.set("cached", rep.cached);
  rec.set("failures", rep.failures);
  rec.write(out_dir);

  out << "generated " << rep.generated.size() << ", cached " << rep.cached.size()
      << ", client calls " << rep.client_calls << "\n";
  if (!rep.complete()) {
    err << "knowledge base incomplete; failed labels:\n";
    for (const auto& [label, why] : rep.failures) err << "  " << label << ": " << why << "\n";
    return kData;
  }
  return kOk;
}

struct TrainArgs {
  std::string config, kb, data, out;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out,
              std::ostream& err) {
  RunRecord rec("train", argv);
  const TrainConfig cfg = load_config(a.config);
  const data::Dataset ds = data::open_dataset(a.data);
  const auto kb = knowledge::load_kb(a.kb, expected_fingerprint(cfg.model), false);
  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  const TrainOutcome o = train_into(cfg, ds, kb, out_dir, a.quiet, err, &rec);

  rec.set("config", json::parse(config_to_json(cfg)));
  rec.set("kb_hash", kb_hash(kb));
  rec.set("dataset_hash", ds.content_hash);
  rec.timing("train_seconds", o.seconds);
  rec.write(out_dir);
  const auto& log = o.result.log;
  out << "trained " << log.size() << " episodes; final loss " << fmt(log.back().loss)
      << "; checkpoint " << o.checkpoint.string() << "\n";
  return kOk;
}

struct EvalCmdArgs {
  std::string checkpoint, data, kb, out;
  EvalArgs eval;
};

int cmd_eval(const EvalCmdArgs& a, const std::vector<std::string>& argv, std::ostream& out,
             std::ostream&) {
  RunRecord rec("eval", argv);
  const fs::path ckpt = resolve_checkpoint(a.checkpoint);
  auto loaded = episodic::load_checkpoint(ckpt);
  const data::Dataset ds = data::open_dataset(a.data);
  const fs::path kb_path = a.kb.empty() ? ckpt / "kb.json" : fs::path(a.kb);
  const auto kb = knowledge::load_kb(kb_path, loaded.meta.kb, false);
  const fs::path out_dir = a.out.empty() ? default_out_for(ckpt) : fs::path(a.out);

  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = eval_model(*loaded.model, loaded.config, kb, ds, a.eval);
  rec.timing("eval_seconds",
             std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  const fs::path json_path = out_dir / "reports" / ("eval_" + rep.scorer + ".json");
  const fs::path csv_path = out_dir / "reports" / ("eval_" + rep.scorer + "_episodes.csv");
  write_text(json_path, rep.to_json());
  write_text(csv_path, rep.to_csv());
  rec.artifact(out_dir, json_path);
  rec.artifact(out_dir, csv_path);
  rec.set("config", json::parse(config_to_json(loaded.config)));
  rec.set("kb_hash", kb_hash(kb));
  rec.set("dataset_hash", ds.content_hash);
  rec.write(out_dir);
  out << summary(rep) << "\n";
  return kOk;
}

struct AblateArgs {
  std::string sweep, values, config, data, kb, fixture, out, checkpoint;
  EvalArgs eval;
  bool quiet = true;
};

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    const auto b = cur.find_first_not_of(' ');
    const auto e = cur.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  if (out.empty()) throw ConfigError("--values lists nothing");
  return out;
}

int parse_int(const std::string& v) {
  std::size_t used = 0;
  const int x = std::stoi(v, &used);
  if (used != v.size()) throw ConfigError("not an integer: " + v);
  return x;
}

void apply_sweep(TrainConfig& cfg, const std::string& sweep, const std::string& v) {
  try {
    if (sweep == "alpha") {
      std::size_t used = 0;
      cfg.model.match.alpha = std::stod(v, &used);
      if (used != v.size()) throw ConfigError("not a number: " + v);
    } else if (sweep == "G") {
      cfg.model.spatial_count = parse_int(v);
    } else if (sweep == "L") {
      cfg.model.temporal_count = parse_int(v);
    } else if (sweep == "N") {
      cfg.model.skc.prototypes = parse_int(v);
    } else if (sweep == "metric") {
      cfg.model.match.temporal = parse_temporal_metric(v);
    } else {
      throw ConfigError("unknown sweep " + sweep);
    }
  } catch (const std::logic_error&) {
    throw ConfigError("invalid value for sweep " + sweep + ": " + v);
  }
  cfg.validate();
}

int cmd_ablate(const AblateArgs& a, const std::vector<std::string>& argv, std::ostream& out,
               std::ostream& err) {
  RunRecord rec("ablate", argv);
  const TrainConfig base = load_config(a.config);
  const auto values = split_values(a.values);
  for (const auto& v : values) {
    TrainConfig probe = base;
    apply_sweep(probe, a.sweep, v);  // reject malformed values before any work
  }
  const data::Dataset ds = data::open_dataset(a.data);
  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  const bool reuse = !a.checkpoint.empty();
  if (reuse && a.sweep != "alpha" && a.sweep != "metric")
    throw ConfigError("--checkpoint only applies to alpha and metric sweeps");
  std::optional<episodic::LoadedCheckpoint> shared;
  if (reuse) shared = episodic::load_checkpoint(resolve_checkpoint(a.checkpoint));

  std::string csv = "sweep,value,accuracy,ci95,n_episodes,status\n";
  int failures = 0;
  for (const auto& v : values) {
    std::string row = a.sweep + "," + v + ",";
    try {
      episodic::EvalReport rep;
      if (reuse) {
        TrainConfig cfg = shared->config;
        apply_sweep(cfg, a.sweep, v);
        shared->model->mutable_config().match = cfg.model.match;
        const auto kb = a.kb.empty()
                            ? knowledge::load_kb(resolve_checkpoint(a.checkpoint) / "kb.json")
                            : knowledge::load_kb(a.kb, shared->meta.kb, false);
        rep = eval_model(*shared->model, cfg, kb, ds, a.eval);
      } else {
        TrainConfig cfg = base;
        apply_sweep(cfg, a.sweep, v);
        const auto kb = obtain_kb(cfg.model, a.sweep == "G" || a.sweep == "L" ? "" : a.kb,
                                  a.fixture, ds, err);
        const fs::path run_dir = out_dir / "runs" / (a.sweep + "_" + v);
        const TrainOutcome o = train_into(cfg, ds, kb, run_dir, a.quiet, err, nullptr);
        rec.artifact(out_dir, o.checkpoint / "manifest.json");
        rec.artifact(out_dir, o.checkpoint / "params.bin");
        rec.artifact(out_dir, o.checkpoint / "kb.json");
        rec.artifact(out_dir, run_dir / "reports" / "loss.csv");
        auto loaded = episodic::load_checkpoint(o.checkpoint);
        rep = eval_model(*loaded.model, cfg, kb, ds, a.eval);
      }
      row += fmt(rep.accuracy, "%.6f") + "," + fmt(rep.ci95, "%.6f") + "," +
             std::to_string(rep.n_episodes) + ",ok\n";
      out << a.sweep << "=" << v << ": " << summary(rep) << "\n";
    } catch (const Error& e) {
      ++failures;
      std::string why = e.what();
      for (char& c : why)
        if (c == ',' || c == '\n') c = ' ';
      row += ",,,error: " + why + "\n";
      err << a.sweep << "=" << v << " failed: " << e.what() << "\n";
    }
    csv += row;
  }
  const fs::path csv_path = out_dir / "reports" / ("ablate_" + a.sweep + ".csv");
  write_text(csv_path, csv);
  rec.artifact(out_dir, csv_path);
  rec.set("config", json::parse(config_to_json(base)));
  rec.set("dataset_hash", ds.content_hash);
  rec.write(out_dir);
  return failures == static_cast<int>(values.size()) ? kData : kOk;
}

struct ReportArgs {
  std::string checkpoint, data, kb, out;
  EvalArgs eval;
  bool episode_dump = false;
  int dumps = 1;
};

int cmd_report(const ReportArgs& a, const std::vector<std::string>& argv, std::ostream& out,
               std::ostream&) {
  RunRecord rec("report", argv);
  const fs::path ckpt = resolve_checkpoint(a.checkpoint);
  auto loaded = episodic::load_checkpoint(ckpt);
  const TrainConfig& cfg = loaded.config;
  const data::Dataset ds = data::open_dataset(a.data);
  const auto kb = knowledge::load_kb(a.kb.empty() ? ckpt / "kb.json" : fs::path(a.kb),
                                     loaded.meta.kb, false);
  const fs::path out_dir = a.out.empty() ? default_out_for(ckpt) : fs::path(a.out);
  const data::DatasetSplit& split = ds.manifest.split(a.eval.split);
  const int way = a.eval.way > 0 ? a.eval.way : cfg.way;
  const int shot = a.eval.shot > 0 ? a.eval.shot : cfg.shot;
  const int queries = a.eval.queries > 0 ? a.eval.queries : cfg.eval_queries;

  episodic::Model& model = *loaded.model;
  const auto attrs = episodic::encode_attributes(kb, split.classes, *model.encoders().text,
                                                 cfg.model.spatial_count, cfg.model.temporal_count);
  episodic::FeatureBank bank(model, ds, split, cfg, a.eval.workers);
  const double alpha = cfg.model.match.alpha;
  std::string index = "episode,query,true_class,chosen_class,correct\n";
  for (int e = 0; a.episode_dump && e < a.dumps; ++e) {
    std::mt19937_64 rng(episodic::episode_stream(a.eval.seed, static_cast<std::uint64_t>(e)));
    const auto ep = episodic::sample_episode(split, way, shot, queries, rng);
    episodic::EpisodeTrace trace;
    const auto scores =
        episodic::score_episode(model, ep.class_labels, episodic::gather(ep, bank), attrs,
                                metrics::Exec::Serial, &trace);
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      const auto qi = static_cast<Eigen::Index>(q);
      Eigen::Index chosen = 0;
      scores.logits.row(qi).maxCoeff(&chosen);
      const std::string stem = "episode" + std::to_string(e) + "_query" + std::to_string(q);

      std::string s = "class,label,D_s,D_t,alpha,D,logit,chosen,true\n";
      for (std::size_t c = 0; c < ep.class_labels.size(); ++c) {
        const auto ci = static_cast<Eigen::Index>(c);
        s += std::to_string(c) + "," + ep.class_labels[c] + "," +
             fmt(scores.spatial(qi, ci), "%.17g") + "," + fmt(scores.temporal(qi, ci), "%.17g") +
             "," + fmt(alpha, "%.17g") + "," + fmt(scores.fused(qi, ci), "%.17g") + "," +
             fmt(scores.logits(qi, ci), "%.17g") + "," + (ci == chosen ? "1" : "0") + "," +
             (static_cast<int>(c) == ep.query_labels[q] ? "1" : "0") + "\n";
      }
      const fs::path scores_path = out_dir / "reports" / (stem + "_scores.csv");
      write_text(scores_path, s);
      rec.artifact(out_dir, scores_path);

      std::string w = "class,label,frame";
      for (int l = 0; l < cfg.model.temporal_count; ++l) w += ",w" + std::to_string(l);
      w += "\n";
      if (!trace.temporal_weights.empty()) {
        for (std::size_t c = 0; c < ep.class_labels.size(); ++c) {
          const Mat& m = trace.temporal_weights[q][c];
          for (Eigen::Index t = 0; t < m.rows(); ++t) {
            w += std::to_string(c) + "," + ep.class_labels[c] + "," + std::to_string(t);
            for (Eigen::Index l = 0; l < m.cols(); ++l) w += "," + fmt(m(t, l), "%.17g");
            w += "\n";
          }
        }
      }
      const fs::path weights_path = out_dir / "reports" / (stem + "_temporal_weights.csv");
      write_text(weights_path, w);
      rec.artifact(out_dir, weights_path);
      index += std::to_string(e) + "," + std::to_string(q) + "," +
               ep.class_labels[static_cast<std::size_t>(ep.query_labels[q])] + "," +
               ep.class_labels[static_cast<std::size_t>(chosen)] + "," +
               (chosen == ep.query_labels[q] ? "1" : "0") + "\n";
    }
  }
  const fs::path index_path = out_dir / "reports" / "episode_dump.csv";
  write_text(index_path, index);
  rec.artifact(out_dir, index_path);
  rec.set("kb_hash", kb_hash(kb));
  rec.set("dataset_hash", ds.content_hash);
  rec.write(out_dir);
  out << "wrote " << index_path.string() << "\n";
  return kOk;
}

struct SynthArgs {
  std::string spec, out;
  std::uint64_t seed = 7;
  bool seed_set = false;
  int g = 6, l = 3;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& argv, std::ostream& out,
              std::ostream&) {
  RunRecord rec("synth", argv);
  data::SyntheticSpec spec;
  std::uint64_t seed = a.seed;
  if (!a.spec.empty()) {
    auto [s, file_seed] = data::synthetic_spec_from_json(read_text(a.spec));
    spec = s;
    if (!a.seed_set) seed = file_seed;
  }
  const auto syn = data::generate_synthetic(spec, seed);
  const fs::path out_dir = a.out;
  const fs::path manifest = out_dir / "dataset.json";
  const fs::path labels = out_dir / "labels.txt";
  const fs::path fixture = out_dir / "fixture.json";
  const fs::path kb = out_dir / "kb.json";
  write_text(manifest, data::manifest_to_json(syn->manifest()));
  std::string names;
  for (const auto& c : syn->classes()) names += c.label + "\n";
  write_text(labels, names);
  write_text(fixture, syn->fixture_responses_json(a.g, a.l));
  knowledge::save_kb(syn->fixture_kb(a.g, a.l), kb);
  for (const auto& p : {manifest, labels, fixture, kb}) rec.artifact(out_dir, p);
  rec.write(out_dir);
  out << "synthetic dataset: " << syn->classes().size() << " classes, " << syn->total_clips()
      << " clips -> " << manifest.string() << "\n";
  return kOk;
}

void add_eval_options(CLI::App* sub, EvalArgs& e, bool with_episodes) {
  if (with_episodes)
    sub->add_option("--episodes", e.episodes, "Evaluation episodes (default: config)")
        ->check(CLI::Range(1, std::numeric_limits<int>::max()).description("at least 1"));
  sub->add_option("--seed", e.seed, "Episode sampling seed");
  sub->add_option("--split", e.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  sub->add_option("--workers", e.workers, "Parallel episode workers")->check(CLI::PositiveNumber);
  sub->add_option("--M", e.way, "Classes per episode (default: config)")->check(CLI::PositiveNumber);
  sub->add_option("--K", e.shot, "Shots per class (default: config)")->check(CLI::PositiveNumber);
  sub->add_option("--n-q", e.queries, "Queries per episode (default: config)")->check(CLI::PositiveNumber);
}

}  // namespace

int exit_code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const NumericalAbort& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kNumerical;
  } catch (const ConfigError& e) {
    err << "usage: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kData;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot action recognition with spatio-temporal attribute knowledge", "dist"};
  app.require_subcommand(1);

  KnowledgeArgs ka;
  auto* kn = app.add_subcommand("knowledge-build", "Generate the attribute knowledge base");
  kn->add_option("--labels", ka.labels, "File with one class label per line")->required()->check(CLI::ExistingFile);
  kn->add_option("--g", ka.g, "Spatial attributes per class")->check(CLI::PositiveNumber);
  kn->add_option("--l", ka.l, "Temporal attributes per class")->check(CLI::PositiveNumber);
  kn->add_option("--out", ka.out, "Knowledge base JSON")->required();
  kn->add_option("--fixture", ka.fixture, "Canned responses instead of the live endpoint")->check(CLI::ExistingFile);
  kn->add_option("--max-inflight", ka.inflight, "Concurrent requests")->check(CLI::PositiveNumber);
  kn->add_option("--retries", ka.retries, "Retries after a count mismatch")->check(CLI::NonNegativeNumber);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Episodic training");
  tr->add_option("--config", ta.config, "Config JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--kb", ta.kb, "Knowledge base JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "Dataset manifest or synthetic spec")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_flag("--quiet", ta.quiet, "No progress lines");

  EvalCmdArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint or run directory")->required();
  ev->add_option("--data", ea.data, "Dataset manifest or synthetic spec")->required()->check(CLI::ExistingFile);
  ev->add_option("--kb", ea.kb, "Knowledge base (default: the checkpoint's)");
  ev->add_option("--out", ea.out, "Output directory (default: the run directory)");
  ev->add_option("--scorer", ea.eval.scorer, "model, oracle, random or frame_mean")
      ->check(CLI::IsMember({"model", "oracle", "random", "frame_mean"}));
  add_eval_options(ev, ea.eval, true);

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "One train+eval per swept value");
  ab->add_option("--sweep", aa.sweep, "alpha, G, L, N or metric")->required()
      ->check(CLI::IsMember({"alpha", "G", "L", "N", "metric"}));
  ab->add_option("--values", aa.values, "Comma separated values")->required();
  ab->add_option("--config", aa.config, "Base config JSON")->required()->check(CLI::ExistingFile);
  ab->add_option("--data", aa.data, "Dataset manifest or synthetic spec")->required()->check(CLI::ExistingFile);
  ab->add_option("--kb", aa.kb, "Knowledge base (alpha, N, metric sweeps)");
  ab->add_option("--fixture", aa.fixture, "Canned LLM responses for rebuilding knowledge");
  ab->add_option("--checkpoint", aa.checkpoint, "Evaluate this checkpoint instead of retraining (alpha, metric)");
  ab->add_option("--out", aa.out, "Output directory")->required();
  add_eval_options(ab, aa.eval, true);

  ReportArgs ra;
  auto* rp = app.add_subcommand("report", "Dump per-query scores and attention weights");
  rp->add_option("--checkpoint", ra.checkpoint, "Checkpoint or run directory")->required();
  rp->add_option("--data", ra.data, "Dataset manifest or synthetic spec")->required()->check(CLI::ExistingFile);
  rp->add_option("--kb", ra.kb, "Knowledge base (default: the checkpoint's)");
  rp->add_option("--out", ra.out, "Output directory (default: the run directory)");
  rp->add_flag("--episode-dump", ra.episode_dump, "Write per-query CSVs");
  rp->add_option("--dumps", ra.dumps, "Episodes to dump")->check(CLI::PositiveNumber);
  add_eval_options(rp, ra.eval, false);

  SynthArgs sa;
  auto* sy = app.add_subcommand("synth", "Write a synthetic dataset manifest and fixture knowledge");
  sy->add_option("--spec", sa.spec, "Synthetic spec JSON")->check(CLI::ExistingFile);
  auto* seed_opt = sy->add_option("--seed", sa.seed, "Generator seed");
  sy->add_option("--g", sa.g, "Spatial attributes per class")->check(CLI::PositiveNumber);
  sy->add_option("--l", sa.l, "Temporal attributes per class")->check(CLI::PositiveNumber);
  sy->add_option("--out", sa.out, "Output directory")->required();

  std::vector<std::string> argv_store{"dist"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage: " << e.what() << "\n";
    return kUsage;
  }
  sa.seed_set = seed_opt->count() > 0;

  try {
    if (*kn) return cmd_knowledge(ka, args, out, err);
    if (*tr) return cmd_train(ta, args, out, err);
    if (*ev) return cmd_eval(ea, args, out, err);
    if (*ab) return cmd_ablate(aa, args, out, err);
    if (*rp) return cmd_report(ra, args, out, err);
    if (*sy) return cmd_synth(sa, args, out, err);
  } catch (...) {
    return exit_code_for_current_exception(err);
  }
  return kUsage;
}

}  // namespace dist::cli
