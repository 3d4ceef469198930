#include "dist/episodic.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace dist;
using namespace dist::episodic;

namespace {

struct Fixture {
  data::Dataset ds;
  knowledge::KnowledgeBase kb;
};

const Fixture& synthetic() {
  static const Fixture f = [] {
    Fixture x;
    x.ds = data::make_dataset(data::generate_synthetic(data::SyntheticSpec{}, 7));
    x.kb = x.ds.synthetic->fixture_kb(6, 3);
    return x;
  }();
  return f;
}

std::vector<std::string> labels_of(const data::Manifest& m) {
  std::vector<std::string> out;
  for (const auto& [n, s] : m.splits) out.insert(out.end(), s.classes.begin(), s.classes.end());
  return out;
}

TrainConfig small_config(int episodes) {
  TrainConfig cfg;
  cfg.episodes_per_epoch = episodes;
  cfg.epochs = 1;
  cfg.lr = 3e-4;
  cfg.augment.flip_probability = 0.0;
  return cfg;
}

std::vector<Mat> snapshot(Model& m) {
  std::vector<Mat> out;
  for (auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "dist_tests" / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Sampling, EpisodeContract) {
  const auto& split = synthetic().ds.manifest.split("train");
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    const Episode ep = sample_episode(split, 5, 1, 5, rng);
    ASSERT_EQ(ep.class_labels.size(), 5u);
    ASSERT_EQ(ep.query.size(), 5u);
    std::set<std::string> support_ids;
    for (const auto& s : ep.support) {
      ASSERT_EQ(s.size(), 1u);
      support_ids.insert(s.begin(), s.end());
    }
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      EXPECT_EQ(support_ids.count(ep.query[q]), 0u);
      ASSERT_GE(ep.query_labels[q], 0);
      ASSERT_LT(ep.query_labels[q], 5);
      const auto& cls = ep.class_labels[static_cast<std::size_t>(ep.query_labels[q])];
      const auto& clips = split.clips.at(cls);
      EXPECT_NE(std::find(clips.begin(), clips.end(), ep.query[q]), clips.end());
    }
    EXPECT_EQ(std::set<std::string>(ep.class_labels.begin(), ep.class_labels.end()).size(), 5u);
  }
  std::mt19937_64 a(9), b(9);
  const Episode x = sample_episode(split, 5, 2, 10, a), y = sample_episode(split, 5, 2, 10, b);
  EXPECT_EQ(x.support, y.support);
  EXPECT_EQ(x.query, y.query);
}

TEST(Sampling, InsufficientData) {
  data::DatasetSplit split;
  split.name = "t";
  for (int c = 0; c < 5; ++c) {
    const std::string l = "c" + std::to_string(c);
    split.classes.push_back(l);
    split.clips[l] = {l + "/0"};
  }
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_episode(split, 5, 1, 5, rng), InsufficientData);
  EXPECT_THROW(sample_episode(split, 6, 1, 0, rng), InsufficientData);
}

TEST(Aggregate, IdentityAndMean) {
  std::mt19937_64 rng(2);
  auto make = [&] {
    return metrics::ClassPrototypes{metrics::SpatialPrototypes(2, 3, oracle::random_mat(rng, 6, 4)),
                                    oracle::random_mat(rng, 2, 4)};
  };
  const auto a = make(), b = make(), c = make();
  std::vector<metrics::ClassPrototypes> one{a};
  EXPECT_EQ(aggregate_support(one).frames, a.frames);
  std::vector<metrics::ClassPrototypes> twin{a, a};
  EXPECT_LT((aggregate_support(twin).spatial.rows - a.spatial.rows).cwiseAbs().maxCoeff(), 1e-15);
  std::vector<metrics::ClassPrototypes> three{a, b, c};
  const auto m = aggregate_support(three);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index j = 0; j < 4; ++j)
      EXPECT_NEAR(m.spatial.rows(i, j),
                  (a.spatial.rows(i, j) + b.spatial.rows(i, j) + c.spatial.rows(i, j)) / 3.0, 1e-15);
}

TEST(Loss, HandCasesOracleAndGradient) {
  ad::Graph g;
  std::vector<int> labels{0, 3};
  ad::Var u = g.input(Mat::Zero(2, 5));
  EXPECT_NEAR(episode_loss(u, labels).scalar(), std::log(5.0), 1e-12);
  Mat dom = Mat::Zero(2, 5);
  dom(0, 0) = 200;
  dom(1, 3) = 200;
  EXPECT_LT(episode_loss(g.input(dom), labels).scalar(), 1e-60);
  std::mt19937_64 rng(3);
  Mat l = oracle::random_mat(rng, 4, 5, 3.0);
  std::vector<int> lab{1, 4, 0, 2};
  ad::Graph g2;
  ad::Var lv = g2.input(l);
  ad::Var loss = episode_loss(lv, lab);
  EXPECT_NEAR(loss.scalar(), oracle::cross_entropy(l, lab), 1e-8);
  g2.backward(loss);
  auto f = [&](const Mat& x) { return oracle::cross_entropy(x, lab); };
  EXPECT_LT(oracle::relative_error(g2.grad(lv), oracle::numeric_gradient(f, l)), 1e-4);
}

TEST(Forward, GraphAndValuePathsAgreeWithComposedOracle) {
  const auto& fx = synthetic();
  ModelConfig mc;
  mc.encoder.frames = 4;
  mc.tkc.frames = 4;
  mc.skc.prototypes = 3;
  Model model(mc, 5);
  const auto& split = fx.ds.manifest.split("test");
  const auto attrs = encode_attributes(fx.kb, split.classes, *model.encoders().text, 6, 3);
  TrainConfig tc;
  tc.model = mc;
  FeatureBank bank(model, fx.ds, split, tc);
  std::mt19937_64 rng(4);
  const Episode ep = sample_episode(split, 3, 1, 3, rng);
  const EpisodeInputs in = gather(ep, bank);

  ad::Graph g(false);
  const Mat graph_logits = episode_forward(g, model, ep.class_labels, in, attrs).value();
  const auto scores = score_episode(model, ep.class_labels, in, attrs);
  EXPECT_EQ(graph_logits.rows(), 3);
  EXPECT_EQ(graph_logits.cols(), 3);
  EXPECT_LT((graph_logits - scores.logits).cwiseAbs().maxCoeff(), 1e-9);

  // composed oracle: class-conditioned compensators, then loop metrics
  auto protos = [&](const ClipFeatures& f, const std::string& cls, Mat& frames) {
    const auto& a = attrs.at(cls);
    frames = tkc::tkc_forward(model.tkc, f.frames, a.temporal, model.config().tkc);
    return skc::skc_forward(model.skc, f.patches, a.spatial, model.config().skc).rows;
  };
  for (std::size_t q = 0; q < ep.query.size(); ++q)
    for (std::size_t c = 0; c < ep.class_labels.size(); ++c) {
      Mat qf, sf;
      const Mat qs = protos(*in.query[q], ep.class_labels[c], qf);
      const Mat ss = protos(*in.support[c][0], ep.class_labels[c], sf);
      const double ds = oracle::spatial_metric(qs, ss, 4, 4, 3);
      const double dt = oracle::otam_smooth(oracle::frame_distances(qf, sf), mc.match.smooth.lambda);
      const double want = -(dt + mc.match.alpha * ds) / mc.match.temperature;
      EXPECT_NEAR(scores.logits(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(c)), want, 1e-9);
    }
}

TEST(Forward, SelfMatchAndKnowledgeMiss) {
  const auto& fx = synthetic();
  Model model(ModelConfig{}, 1);
  const auto& split = fx.ds.manifest.split("test");
  const auto attrs = encode_attributes(fx.kb, split.classes, *model.encoders().text, 6, 3);
  TrainConfig tc;
  FeatureBank bank(model, fx.ds, split, tc);
  std::mt19937_64 rng(5);
  const Episode ep = sample_episode(split, 5, 1, 5, rng);
  EpisodeInputs in = gather(ep, bank);
  for (std::size_t q = 0; q < in.query.size(); ++q)
    in.query[q] = in.support[static_cast<std::size_t>(ep.query_labels[q])][0];
  const auto s = score_episode(model, ep.class_labels, in, attrs);
  for (Eigen::Index q = 0; q < s.logits.rows(); ++q) {
    Eigen::Index best = 0;
    s.logits.row(q).maxCoeff(&best);
    EXPECT_EQ(best, ep.query_labels[static_cast<std::size_t>(q)]);
  }
  knowledge::KnowledgeBase partial = fx.kb;
  partial.entries.erase(split.classes[0]);
  EXPECT_THROW(encode_attributes(partial, split.classes, *model.encoders().text, 6, 3), KnowledgeMiss);
}

TEST(Forward, AlphaZeroArgmaxEqualsTemporalOnly) {
  const auto& fx = synthetic();
  ModelConfig mc;
  mc.match.alpha = 0.0;
  Model model(mc, 2);
  const auto& split = fx.ds.manifest.split("test");
  const auto attrs = encode_attributes(fx.kb, split.classes, *model.encoders().text, 6, 3);
  TrainConfig tc;
  tc.model = mc;
  FeatureBank bank(model, fx.ds, split, tc);
  std::mt19937_64 rng(6);
  for (int e = 0; e < 5; ++e) {
    const Episode ep = sample_episode(split, 5, 1, 10, rng);
    const auto s = score_episode(model, ep.class_labels, gather(ep, bank), attrs);
    for (Eigen::Index q = 0; q < s.logits.rows(); ++q) {
      Eigen::Index a = 0, b = 0;
      s.logits.row(q).maxCoeff(&a);
      s.temporal.row(q).minCoeff(&b);
      EXPECT_EQ(a, b);
    }
  }
}

TEST(Training, DeterministicFrozenTextAndCheckpointRoundTrip) {
  const auto& fx = synthetic();
  const TrainConfig cfg = small_config(20);
  auto run = [&] {
    auto m = std::make_unique<Model>(cfg.model, cfg.seed);
    const auto attrs =
        encode_attributes(fx.kb, labels_of(fx.ds.manifest), *m->encoders().text, 6, 3);
    auto res = train(*m, cfg, fx.ds, attrs);
    return std::make_pair(std::move(m), std::move(res));
  };
  Model fresh(cfg.model, cfg.seed);
  const auto text_before = fresh.encoders().text->snapshot();
  auto [m1, r1] = run();
  auto [m2, r2] = run();
  EXPECT_EQ(loss_csv(r1.log), loss_csv(r2.log));
  EXPECT_EQ(m1->encoders().text->snapshot(), text_before);
  const auto s1 = snapshot(*m1), s2 = snapshot(*m2);
  ASSERT_EQ(s1.size(), s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) EXPECT_EQ(s1[i], s2[i]);
  // training moved the parameters
  const auto s0 = snapshot(fresh);
  double moved = 0.0;
  for (std::size_t i = 0; i < s0.size(); ++i) moved += (s0[i] - s1[i]).cwiseAbs().sum();
  EXPECT_GT(moved, 0.0);

  const auto dir = temp_dir("ckpt");
  save_checkpoint(dir, *m1, cfg, {fx.kb.fingerprint, fx.ds.content_hash, r1.rng_state, 20});
  auto loaded = load_checkpoint(dir);
  EXPECT_EQ(config_to_json(loaded.config), config_to_json(cfg));
  EXPECT_EQ(loaded.meta.rng_state, r1.rng_state);
  EXPECT_EQ(loaded.meta.kb, fx.kb.fingerprint);
  const auto s3 = snapshot(*loaded.model);
  for (std::size_t i = 0; i < s1.size(); ++i) EXPECT_EQ(s1[i], s3[i]);

  // flip one byte of the blob
  const auto blob = dir / "params.bin";
  std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(17);
  f.put('\x5a');
  f.close();
  EXPECT_THROW(load_checkpoint(dir), SchemaError);
}

TEST(Training, FailsFastOnMissingKnowledge) {
  const auto& fx = synthetic();
  const TrainConfig cfg = small_config(5);
  Model model(cfg.model, cfg.seed);
  knowledge::KnowledgeBase partial = fx.kb;
  partial.entries.erase(fx.ds.manifest.split("train").classes[3]);
  const auto attrs = encode_attributes(partial, fx.ds.manifest.split("test").classes,
                                       *model.encoders().text, 6, 3);
  int episodes = 0;
  EXPECT_THROW(train(model, cfg, fx.ds, attrs, [&](const EpisodeLog&) { ++episodes; }), KnowledgeMiss);
  EXPECT_EQ(episodes, 0);
}

TEST(Training, LossTrendsDownOverFirstFiftyEpisodes) {
  const auto& fx = synthetic();
  const TrainConfig cfg = small_config(50);
  Model model(cfg.model, cfg.seed);
  const auto attrs = encode_attributes(fx.kb, labels_of(fx.ds.manifest), *model.encoders().text, 6, 3);
  const auto res = train(model, cfg, fx.ds, attrs);
  std::vector<double> medians;
  for (int w = 0; w < 5; ++w) {
    std::vector<double> xs;
    for (int i = 0; i < 10; ++i) xs.push_back(res.log[static_cast<std::size_t>(w * 10 + i)].loss);
    std::nth_element(xs.begin(), xs.begin() + 5, xs.end());
    medians.push_back(xs[5]);
  }
  // least-squares slope of the window medians
  double mx = 2.0, my = 0.0;
  for (double m : medians) my += m / 5.0;
  double num = 0.0, den = 0.0;
  for (int w = 0; w < 5; ++w) {
    num += (w - mx) * (medians[static_cast<std::size_t>(w)] - my);
    den += (w - mx) * (w - mx);
  }
  EXPECT_LT(num / den, 0.0);
  EXPECT_LT(medians.back(), medians.front());
}

TEST(Optimizer, ScheduleMilestones) {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 1.0;
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 0), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 5), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 6), 0.1);
  EXPECT_NEAR(scheduled_lr(cfg, 8), 0.01, 1e-15);
}

TEST(Optimizer, AdamFirstStepMovesByLr) {
  ad::Parameter p{"p", Mat::Constant(1, 2, 1.0), {}};
  Adam opt({&p}, OptimizerConfig{}, 0.1);
  opt.zero_grad();
  p.grad << 3.0, -2.0;
  opt.step();
  EXPECT_NEAR(p.value(0, 0), 0.9, 1e-6);
  EXPECT_NEAR(p.value(0, 1), 1.1, 1e-6);
}

TEST(Evaluation, OracleRandomDeterminismAndNoSideEffects) {
  const auto& fx = synthetic();
  Model model(ModelConfig{}, 3);
  const auto& split = fx.ds.manifest.split("test");
  TrainConfig tc;
  FeatureBank bank(model, fx.ds, split, tc);
  EvalOptions o;
  o.episodes = 50;
  o.queries = 5;
  EXPECT_EQ(evaluate(OracleScorer(), bank, split, o).accuracy, 1.0);

  EvalOptions r = o;
  r.episodes = 2000;
  const auto rep = evaluate(RandomScorer(), bank, split, r);
  EXPECT_NEAR(rep.accuracy, 0.20, 0.02);

  const auto attrs = encode_attributes(fx.kb, split.classes, *model.encoders().text, 6, 3);
  const auto before = snapshot(model);
  ModelScorer ms(model, attrs);
  o.episodes = 20;
  const auto a = evaluate(ms, bank, split, o);
  o.workers = 3;
  const auto b = evaluate(ms, bank, split, o);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.to_csv(), b.to_csv());
  const auto after = snapshot(model);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
  EXPECT_GE(a.accuracy, 0.0);
  EXPECT_LE(a.accuracy, 1.0);
  o.episodes = 0;
  EXPECT_THROW(evaluate(ms, bank, split, o), ConfigError);
}

TEST(Evaluation, SanityNullWithHashedStubFeatures) {
  const auto& fx = synthetic();
  ModelConfig mc;
  mc.encoder.stub_mode = encoders::StubVisualMode::Hash;
  Model model(mc, 4);
  const auto& split = fx.ds.manifest.split("test");
  TrainConfig tc;
  tc.model = mc;
  FeatureBank bank(model, fx.ds, split, tc);
  const auto attrs = encode_attributes(fx.kb, split.classes, *model.encoders().text, 6, 3);
  EvalOptions o;
  o.episodes = 200;
  o.queries = 5;
  const auto rep = evaluate(ModelScorer(model, attrs), bank, split, o);
  // binomial noise of 1000 five-way decisions: sd = sqrt(.2 * .8 / 1000) ~ 0.0126
  EXPECT_NEAR(rep.accuracy, 0.2, 3.0 * 0.0127);
}

TEST(Evaluation, ConfidenceInterval) {
  std::vector<double> xs{0.2, 0.4, 0.6, 0.8};
  const auto [m, ci] = mean_ci95(xs);
  EXPECT_NEAR(m, 0.5, 1e-15);
  const double sd = std::sqrt((0.09 + 0.01 + 0.01 + 0.09) / 3.0);
  EXPECT_NEAR(ci, 1.96 * sd / 2.0, 1e-12);
}
