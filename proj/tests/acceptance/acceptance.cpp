// One PASS/FAIL line per acceptance criterion. Exit status is nonzero if any
// criterion fails.

#include "dist/cli.hpp"
#include "dist/episodic.hpp"
#include "dist/metric_ops.hpp"
#include "../oracles.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace dist;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void verdict(const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%s] %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

metrics::SpatialPrototypes protos(std::mt19937_64& rng, int t, int n, int c) {
  return metrics::SpatialPrototypes(t, n, oracle::random_mat(rng, t * n, c));
}

// ---- metric-oracle equivalence ---------------------------------------------------

void metric_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  for (int i = 0; i < 200; ++i) {
    const int c = uniform_int(rng, 2, 8);
    Mat a = oracle::random_mat(rng, uniform_int(rng, 1, 4), c);
    Mat b = oracle::random_mat(rng, uniform_int(rng, 1, 4), c);
    track(metrics::mean_hausdorff(a, b), oracle::mean_hausdorff(a, b));
  }
  for (int i = 0; i < 200; ++i) {
    const int t = uniform_int(rng, 1, 4), n = uniform_int(rng, 1, 3), c = uniform_int(rng, 2, 8);
    auto q = protos(rng, t, n, c), s = protos(rng, t, n, c);
    track(metrics::spatial_metric(q, s), oracle::spatial_metric(q.rows, s.rows, t, t, n));
  }
  for (int i = 0; i < 200; ++i) {
    Mat d = oracle::random_uniform(rng, uniform_int(rng, 1, 6), uniform_int(rng, 1, 6), 0, 2);
    track(metrics::bi_mhm_temporal(d), oracle::bi_mhm(d));
  }
  for (int i = 0; i < 200; ++i) {
    const int t = uniform_int(rng, 1, 4), n = uniform_int(rng, 1, 3), c = uniform_int(rng, 2, 8);
    const int m = uniform_int(rng, 2, 5), nq = uniform_int(rng, 1, 3);
    metrics::MatchConfig cfg;
    cfg.alpha = std::uniform_real_distribution<double>(0, 1)(rng);
    cfg.temporal = i % 2 ? metrics::TemporalMetric::BiMhm : metrics::TemporalMetric::Otam;
    std::vector<metrics::ClassPrototypes> support;
    for (int k = 0; k < m; ++k) support.push_back({protos(rng, t, n, c), oracle::random_mat(rng, t, c)});
    std::vector<std::vector<metrics::ClassPrototypes>> queries(static_cast<std::size_t>(nq));
    for (auto& row : queries)
      for (int k = 0; k < m; ++k) row.push_back({protos(rng, t, n, c), oracle::random_mat(rng, t, c)});
    const auto s = metrics::match_episode(queries, support, cfg,
                                          i % 4 < 2 ? metrics::Exec::Serial : metrics::Exec::Parallel);
    for (int q = 0; q < nq; ++q)
      for (int k = 0; k < m; ++k) {
        const auto& qp = queries[static_cast<std::size_t>(q)][static_cast<std::size_t>(k)];
        const auto& sp = support[static_cast<std::size_t>(k)];
        const double ds = oracle::spatial_metric(qp.spatial.rows, sp.spatial.rows, t, t, n);
        const Mat fd = oracle::frame_distances(qp.frames, sp.frames);
        const double dt = cfg.temporal == metrics::TemporalMetric::Otam
                              ? oracle::otam_smooth(fd, cfg.smooth.lambda)
                              : oracle::bi_mhm(fd);
        track(s.logits(q, k), -(dt + cfg.alpha * ds) / cfg.temperature);
      }
  }
  const double secs = seconds_since(t0);
  verdict("metric-oracle equivalence", worst <= 1e-9 && secs < 60.0,
          "4 x 200 instances, max |diff| " + fmt("%.3g", worst) + " (tol 1e-9), " +
              fmt("%.1f", secs) + " s (limit 60 s)");
}

// ---- OTAM exactness ----------------------------------------------------------------

void otam_exactness() {
  std::mt19937_64 rng(202);
  int hard_mismatch = 0;
  double smooth_worst = 0.0, limit_worst = 0.0;
  for (int t = 2; t <= 4; ++t)
    for (int i = 0; i < 100; ++i) {
      Mat d = oracle::random_uniform(rng, t, t, 0, 2);
      if (metrics::otam(d, {0.1, true}) != oracle::otam_hard(d)) ++hard_mismatch;
      smooth_worst = std::max(smooth_worst,
                              std::abs(metrics::otam(d, {0.1, false}) - oracle::otam_smooth(d, 0.1)));
      limit_worst = std::max(limit_worst,
                             std::abs(metrics::otam(d, {1e-3, false}) - metrics::otam(d, {0.1, true})));
    }
  verdict("OTAM exactness", hard_mismatch == 0 && smooth_worst <= 1e-8 && limit_worst <= 1e-3,
          "300 matrices (2x2..4x4): hard mismatches " + std::to_string(hard_mismatch) +
              ", smooth max |diff| " + fmt("%.3g", smooth_worst) + " (tol 1e-8), lambda=1e-3 vs hard " +
              fmt("%.3g", limit_worst) + " (tol 1e-3)");
}

// ---- gradient suite --------------------------------------------------------------

void gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  double worst = 0.0;
  std::string worst_at;
  auto track = [&](const std::string& what, const Mat& a, const Mat& n) {
    const double e = oracle::relative_error(a, n);
    if (e > worst) {
      worst = e;
      worst_at = what;
    }
  };
  for (int rep = 0; rep < 3; ++rep) {
    const int t = uniform_int(rng, 2, 4), n = uniform_int(rng, 1, 3), c = 2 * uniform_int(rng, 1, 4);
    const int p = uniform_int(rng, 2, 4), g = uniform_int(rng, 1, 4), l = uniform_int(rng, 1, 3);

    // skc_forward
    skc::SkcConfig scfg;
    scfg.prototypes = n;
    auto sp = skc::SkcParams::init(c, scfg, 1 + rep);
    for (auto* q : sp.all()) q->value = oracle::random_mat(rng, q->value.rows(), q->value.cols(), 0.5);
    std::vector<Mat> frames;
    for (int i = 0; i < t; ++i) frames.push_back(oracle::random_mat(rng, p, c));
    Mat sattr = oracle::random_mat(rng, g, c), sw = oracle::random_mat(rng, t * n, c);
    {
      ad::Graph gr;
      for (auto* q : sp.all()) q->zero_grad();
      auto v = skc::bind(gr, sp);
      std::vector<ad::Var> xs;
      for (auto& f : frames) xs.push_back(gr.input(f));
      ad::Var av = gr.input(sattr);
      gr.backward(ad::weighted_sum(skc::skc_forward(v, xs, av, scfg), sw));
      auto loss = [&]() {
        return (skc::skc_forward(sp, frames, sattr, scfg).rows.array() * sw.array()).sum();
      };
      for (auto* q : sp.all()) {
        const Mat keep = q->value;
        track(q->name, q->grad, oracle::numeric_gradient([&](const Mat& x) {
                q->value = x;
                const double r = loss();
                q->value = keep;
                return r;
              }, keep));
      }
      track("skc attrs", gr.grad(av), oracle::numeric_gradient([&](const Mat& x) {
              return (skc::skc_forward(sp, frames, x, scfg).rows.array() * sw.array()).sum();
            }, sattr));
    }

    // tkc_forward
    tkc::TkcConfig tcfg;
    tcfg.frames = t;
    tcfg.heads = c % 2 == 0 ? 2 : 1;
    auto tp = tkc::TkcParams::init(c, tcfg, 5 + rep);
    for (auto* q : tp.all()) q->value = oracle::random_mat(rng, q->value.rows(), q->value.cols(), 0.5);
    Mat f = oracle::random_mat(rng, t, c), tattr = oracle::random_mat(rng, l, c), tw = oracle::random_mat(rng, t, c);
    {
      ad::Graph gr;
      for (auto* q : tp.all()) q->zero_grad();
      auto v = tkc::bind(gr, tp);
      ad::Var fv = gr.input(f), av = gr.input(tattr);
      gr.backward(ad::weighted_sum(tkc::tkc_forward(fv, av, v, tcfg), tw));
      auto loss = [&](const Mat& ff, const Mat& aa) {
        return (tkc::tkc_forward(tp, ff, aa, tcfg).array() * tw.array()).sum();
      };
      for (auto* q : tp.all()) {
        const Mat keep = q->value;
        track(q->name, q->grad, oracle::numeric_gradient([&](const Mat& x) {
                q->value = x;
                const double r = loss(f, tattr);
                q->value = keep;
                return r;
              }, keep));
      }
      track("tkc frames", gr.grad(fv), oracle::numeric_gradient([&](const Mat& x) { return loss(x, tattr); }, f));
      track("tkc attrs", gr.grad(av), oracle::numeric_gradient([&](const Mat& x) { return loss(f, x); }, tattr));
    }

    // smooth otam
    {
      Mat d = oracle::random_uniform(rng, t, uniform_int(rng, 2, 4), 0.1, 2);
      metrics::SmoothMinConfig cfg{0.1, false};
      ad::Graph gr;
      ad::Var dv = gr.input(d);
      gr.backward(ad::otam(dv, cfg));
      track("otam", gr.grad(dv), oracle::numeric_gradient([&](const Mat& x) { return oracle::otam_smooth(x, 0.1); }, d));
    }

    // spatial metric
    {
      Mat q = oracle::random_mat(rng, t * n, c), s = oracle::random_mat(rng, t * n, c);
      ad::Graph gr;
      ad::Var qv = gr.input(q), sv = gr.input(s);
      gr.backward(ad::bidirectional_min_mean(ad::hausdorff_matrix(qv, sv, n, {})));
      track("spatial_metric query", gr.grad(qv), oracle::numeric_gradient([&](const Mat& x) {
              return oracle::spatial_metric(x, s, t, t, n);
            }, q));
      track("spatial_metric support", gr.grad(sv), oracle::numeric_gradient([&](const Mat& x) {
              return oracle::spatial_metric(q, x, t, t, n);
            }, s));
    }

    // episode loss
    {
      const int m = uniform_int(rng, 2, 5), nq = uniform_int(rng, 1, 6);
      Mat logits = oracle::random_mat(rng, nq, m, 2.0);
      std::vector<int> labels;
      for (int i = 0; i < nq; ++i) labels.push_back(uniform_int(rng, 0, m - 1));
      ad::Graph gr;
      ad::Var lv = gr.input(logits);
      gr.backward(episodic::episode_loss(lv, labels));
      track("episode_loss", gr.grad(lv), oracle::numeric_gradient([&](const Mat& x) {
              return oracle::cross_entropy(x, labels);
            }, logits));
    }
  }
  const double secs = seconds_since(t0);
  verdict("gradient suite", worst <= 1e-4 && secs < 120.0,
          "skc, tkc, smooth otam, spatial_metric, episode_loss: max rel err " + fmt("%.3g", worst) + " at " +
              worst_at + " (tol 1e-4), " + fmt("%.1f", secs) + " s (limit 120 s)");
}

// ---- structural invariants -------------------------------------------------------

void structural() {
  std::mt19937_64 rng(404);
  std::vector<std::string> broken;
  double softmax_worst = 0.0;

  skc::SkcConfig scfg;
  scfg.prototypes = 3;
  auto sp = skc::SkcParams::init(8, scfg, 9);
  std::vector<Mat> frames;
  for (int i = 0; i < 4; ++i) frames.push_back(oracle::random_mat(rng, 5, 8));
  Mat sattr = oracle::random_mat(rng, 6, 8);
  {
    ad::Graph g(false);
    auto v = skc::bind(g, sp);
    std::vector<ad::Var> xs;
    for (auto& f : frames) xs.push_back(g.constant(f));
    skc::SkcTrace tr;
    skc::skc_forward(v, xs, g.constant(sattr), scfg, &tr);
    auto check = [&](const Mat& w) {
      softmax_worst = std::max(softmax_worst, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
    };
    check(tr.self_weights.value());
    for (auto& w : tr.patch_weights) check(w.value());
    for (auto& w : tr.attr_weights) check(w.value());
    tkc::TkcConfig tcfg;
    tcfg.frames = 4;
    auto tp = tkc::TkcParams::init(8, tcfg, 3);
    Mat w;
    tkc::tkc_forward(tp, oracle::random_mat(rng, 4, 8), oracle::random_mat(rng, 3, 8), tcfg, &w);
    check(w);
  }
  if (softmax_worst > 1e-6) broken.push_back("softmax rows");

  // residual identity with zeroed value projections
  {
    auto zp = sp;
    zp.patch_value.value.setZero();
    zp.attr_value.value.setZero();
    const auto out = skc::skc_forward(zp, frames, sattr, scfg);
    ad::Graph g(false);
    auto v = skc::bind(g, zp);
    const Mat base =
        skc::prototype_self_attention(v.prototypes, v.self_query, v.self_key, v.self_value, scfg).value();
    bool exact = true;
    for (int t = 0; t < 4; ++t) exact = exact && Mat(out.frame(t)) == base;
    Mat f = oracle::random_mat(rng, 4, 8), q = oracle::random_mat(rng, 3, 8);
    ad::Var id = tkc::inject_temporal_attributes(g.constant(f), g.constant(q),
                                                 g.constant(oracle::random_mat(rng, 8, 8)),
                                                 g.constant(Mat::Zero(8, 8)), {});
    exact = exact && id.value() == f;
    zp.self_value.value.setZero();
    const auto bare = skc::skc_forward(zp, frames, sattr, scfg);
    for (int t = 0; t < 4; ++t) exact = exact && Mat(bare.frame(t)) == zp.prototypes.value;
    if (!exact) broken.push_back("residual identity");
  }

  // spatial metric permutations, hausdorff symmetry and self distance
  double perm_worst = 0.0, sym_worst = 0.0, self_worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const int t = uniform_int(rng, 1, 4), n = uniform_int(rng, 1, 3), c = uniform_int(rng, 2, 8);
    auto a = protos(rng, t, n, c), b = protos(rng, t, n, c);
    const double base = metrics::spatial_metric(a, b);
    std::vector<int> fperm(static_cast<std::size_t>(t)), order;
    std::iota(fperm.begin(), fperm.end(), 0);
    std::shuffle(fperm.begin(), fperm.end(), rng);
    for (int fr : fperm) {
      std::vector<int> pp(static_cast<std::size_t>(n));
      std::iota(pp.begin(), pp.end(), 0);
      std::shuffle(pp.begin(), pp.end(), rng);
      for (int k : pp) order.push_back(fr * n + k);
    }
    Mat ra(a.rows.rows(), c), rb(b.rows.rows(), c);
    for (std::size_t i = 0; i < order.size(); ++i) {
      ra.row(static_cast<Eigen::Index>(i)) = a.rows.row(order[i]);
      rb.row(static_cast<Eigen::Index>(i)) = b.rows.row(order[i]);
    }
    perm_worst = std::max(perm_worst, std::abs(metrics::spatial_metric({t, n, ra}, b) - base));
    perm_worst = std::max(perm_worst, std::abs(metrics::spatial_metric(a, {t, n, rb}) - base));
    Mat x = oracle::random_mat(rng, n, c), y = oracle::random_mat(rng, uniform_int(rng, 1, 3), c);
    sym_worst = std::max(sym_worst, std::abs(metrics::mean_hausdorff(x, y) - metrics::mean_hausdorff(y, x)));
    self_worst = std::max(self_worst, std::abs(metrics::mean_hausdorff(x, x)));
  }
  if (perm_worst > 1e-12) broken.push_back("spatial_metric permutation");
  if (sym_worst > 1e-12) broken.push_back("hausdorff symmetry");
  if (self_worst > 1e-12) broken.push_back("hausdorff self distance");

  bool fuse_ok = true;
  for (int rep = 0; rep < 1000; ++rep) {
    const double dt = oracle::random_uniform(rng, 1, 1, 0, 4)(0, 0), ds = oracle::random_uniform(rng, 1, 1, 0, 4)(0, 0);
    fuse_ok = fuse_ok && metrics::fuse(dt, ds, 0.0) == dt;
  }
  if (!fuse_ok) broken.push_back("fuse alpha=0");

  std::string detail = "softmax max |row sum - 1| " + fmt("%.2g", softmax_worst) +
                       ", permutation max |diff| " + fmt("%.2g", perm_worst) + ", hausdorff asym " +
                       fmt("%.2g", sym_worst) + ", self " + fmt("%.2g", self_worst);
  for (const auto& b : broken) detail += "; broken: " + b;
  verdict("structural invariants", broken.empty(), detail);
}

// ---- prompt fidelity -------------------------------------------------------------

void prompts() {
  const std::string s = knowledge::build_spatial_prompt("drink", 6);
  const std::string t = knowledge::build_temporal_prompt("drink", 3);
  const bool ok =
      s == "Given action label {drink}, please generate {6} most related objects for each class." &&
      t == "Given action label {drink}, please describe {3} states of each action in simple and short words.";
  verdict("prompt fidelity", ok, "\"" + s + "\" | \"" + t + "\"");
}

// ---- end-to-end runs through the CLI ---------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dist::cli::run(args, out, err);
  if (code != 0) std::cerr << "dist " << args.front() << " exited " << code << ": " << err.str();
  return code == 0;
}

struct Eval {
  double accuracy = 0.0, ci95 = 0.0;
};

Eval read_eval(const fs::path& run, const std::string& scorer) {
  const json j = json::parse(slurp(run / "reports" / ("eval_" + scorer + ".json")));
  return {j.at("accuracy").get<double>(), j.at("ci95").get<double>()};
}

void end_to_end(const fs::path& work) {
  const fs::path config = fs::path(DIST_SOURCE_DIR) / "configs" / "synthetic_quick.json";
  const fs::path data = fs::path(DIST_SOURCE_DIR) / "data" / "synthetic.json";
  const std::string seed = "11";
  fs::remove_all(work);
  if (!cli({"synth", "--spec", data.string(), "--out", (work / "synthetic").string()})) {
    verdict("learning signal", false, "could not write the fixture knowledge base");
    return;
  }
  const std::string kb = (work / "synthetic" / "kb.json").string();

  auto train_eval = [&](const fs::path& out, const std::vector<std::string>& scorers) {
    if (!cli({"train", "--config", config.string(), "--kb", kb, "--data", data.string(), "--out",
              out.string(), "--quiet"}))
      return false;
    for (const auto& s : scorers)
      if (!cli({"eval", "--checkpoint", out.string(), "--data", data.string(), "--seed", seed,
                "--scorer", s}))
        return false;
    return true;
  };

  const auto t0 = Clock::now();
  const fs::path main_run = work / "main";
  const bool ran = train_eval(main_run, {"model", "frame_mean", "random"});
  const double secs = seconds_since(t0);
  if (!ran) {
    verdict("learning signal", false, "train/eval failed");
  } else {
    const Eval m = read_eval(main_run, "model"), b = read_eval(main_run, "frame_mean"),
               r = read_eval(main_run, "random");
    const bool ok = m.accuracy >= 0.60 && m.accuracy - b.accuracy >= 0.10 &&
                    m.accuracy - m.ci95 > r.accuracy + r.ci95 && m.accuracy - m.ci95 > 0.20 && secs < 900.0;
    verdict("learning signal", ok,
            "model " + fmt("%.4f", m.accuracy) + " +- " + fmt("%.4f", m.ci95) + ", frame-mean baseline " +
                fmt("%.4f", b.accuracy) + " +- " + fmt("%.4f", b.ci95) + " (margin " +
                fmt("%.1f", 100.0 * (m.accuracy - b.accuracy)) + " pp, need >= 10), random " +
                fmt("%.4f", r.accuracy) + " +- " + fmt("%.4f", r.ci95) +
                ", 500 train / 500 test episodes, " + fmt("%.0f", secs) + " s (limit 900 s)");
  }

  // alpha sweep endpoints
  const fs::path sweep = work / "sweep";
  if (!ran || !cli({"ablate", "--sweep", "alpha", "--values", "0,1", "--config", config.string(), "--data",
                    data.string(), "--kb", kb, "--out", sweep.string(), "--seed", seed})) {
    verdict("ablation direction", false, "sweep failed");
  } else {
    std::istringstream csv(slurp(sweep / "reports" / "ablate_alpha.csv"));
    std::string line;
    std::getline(csv, line);
    std::map<std::string, double> acc;
    while (std::getline(csv, line)) {
      std::vector<std::string> c;
      std::istringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) c.push_back(cell);
      if (c.size() >= 6 && c[5] == "ok") acc[c[1]] = std::stod(c[2]);
    }
    const double mid = read_eval(main_run, "model").accuracy;
    const bool have = acc.count("0") && acc.count("1");
    const double bound = have ? std::max(acc["0"], acc["1"]) - 0.01 : 1.0;
    verdict("ablation direction", have && mid >= bound,
            "acc(alpha=0) " + fmt("%.4f", have ? acc["0"] : -1) + ", acc(alpha=0.5) " + fmt("%.4f", mid) +
                ", acc(alpha=1) " + fmt("%.4f", have ? acc["1"] : -1) + " (need alpha=0.5 >= " +
                fmt("%.4f", bound) + ")");
  }

  // determinism: an independent repeat of train + eval
  const fs::path repeat = work / "repeat";
  if (!ran || !train_eval(repeat, {"model"})) {
    verdict("determinism", false, "repeat run failed");
  } else {
    std::vector<std::string> differ;
    for (const char* f : {"reports/loss.csv", "reports/eval_model.json", "reports/eval_model_episodes.csv",
                          "checkpoint/params.bin"})
      if (slurp(main_run / f) != slurp(repeat / f)) differ.push_back(f);
    std::string detail = "loss.csv, eval_model.json, eval_model_episodes.csv, params.bin compared byte for byte";
    for (const auto& d : differ) detail += "; differs: " + d;
    verdict("determinism", differ.empty(), detail);
  }
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "dist_acceptance";
  metric_oracles();
  otam_exactness();
  gradients();
  structural();
  prompts();
  end_to_end(work);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
