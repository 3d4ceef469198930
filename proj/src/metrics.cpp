#include "dist/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <limits>

namespace dist::metrics {

SpatialPrototypes::SpatialPrototypes(int t, int n, Mat stacked)
    : frames(t), protos(n), rows(std::move(stacked)) {
  if (t < 1 || n < 1) throw ShapeError("SpatialPrototypes: frames and protos must be >= 1");
  if (rows.rows() != static_cast<Eigen::Index>(t) * n)
    throw ShapeError("SpatialPrototypes: row count must equal frames * protos");
}

void SmoothMinConfig::validate() const {
  if (!hard && !(lambda > 0.0)) throw ConfigError("smooth-min lambda must be > 0");
}

double cosine_distance(const Eigen::Ref<const RowVec>& u, const Eigen::Ref<const RowVec>& v) {
  if (u.size() != v.size()) throw ShapeError("cosine_distance: dimension mismatch");
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) throw ZeroVectorError("cosine_distance: zero-norm vector");
  // rounding can push parallel vectors a hair below zero
  return std::max(0.0, 1.0 - u.dot(v) / (nu * nv));
}

Mat pairwise_distance(const Mat& a, const Mat& b, DistanceKind kind) {
  if (a.cols() != b.cols()) throw ShapeError("pairwise_distance: dimension mismatch");
  if (kind == DistanceKind::Euclidean) {
    Mat out(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < b.rows(); ++j) out(i, j) = (a.row(i) - b.row(j)).norm();
    return out;
  }
  const Eigen::VectorXd na = a.rowwise().norm();
  const Eigen::VectorXd nb = b.rowwise().norm();
  if ((na.array() == 0.0).any() || (nb.array() == 0.0).any())
    throw ZeroVectorError("pairwise_distance: zero-norm row");
  Mat sim = a * b.transpose();
  sim.array().colwise() /= na.array();
  sim.array().rowwise() /= nb.transpose().array();
  return (1.0 - sim.array()).cwiseMax(0.0).matrix();
}

namespace {

double hausdorff_from_distances(const Mat& d, bool normalize) {
  const double forward = d.rowwise().minCoeff().sum();
  const double backward = d.colwise().minCoeff().sum();
  if (!normalize) return forward + backward;
  return forward / static_cast<double>(d.rows()) + backward / static_cast<double>(d.cols());
}

void check_pair(const SpatialPrototypes& q, const SpatialPrototypes& s) {
  if (q.dim() != s.dim()) throw ShapeError("spatial prototypes: feature dimension mismatch");
  if (q.rows.size() == 0 || s.rows.size() == 0) throw ShapeError("spatial prototypes: empty");
}

}  // namespace

double mean_hausdorff(const Mat& a, const Mat& b, DistanceKind kind, bool normalize) {
  if (a.rows() == 0 || b.rows() == 0) throw ShapeError("mean_hausdorff: empty set");
  return hausdorff_from_distances(pairwise_distance(a, b, kind), normalize);
}

Mat hausdorff_frame_matrix(const SpatialPrototypes& query, const SpatialPrototypes& support,
                           const HausdorffOptions& opts, Exec exec) {
  check_pair(query, support);
  const int tq = query.frames;
  const int ts = support.frames;
  Mat out(tq, ts);
  if (exec == Exec::Parallel) {
    // Exceptions must not escape an OpenMP region; validate norms up front.
    if (opts.distance == DistanceKind::Cosine &&
        ((query.rows.rowwise().norm().array() == 0.0).any() ||
         (support.rows.rowwise().norm().array() == 0.0).any()))
      throw ZeroVectorError("hausdorff_frame_matrix: zero-norm prototype");
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < tq; ++i)
      for (int j = 0; j < ts; ++j)
        out(i, j) = hausdorff_from_distances(
            pairwise_distance(query.frame(i), support.frame(j), opts.distance), opts.normalize);
    return out;
  }
  for (int i = 0; i < tq; ++i)
    for (int j = 0; j < ts; ++j)
      out(i, j) = hausdorff_from_distances(
          pairwise_distance(query.frame(i), support.frame(j), opts.distance), opts.normalize);
  return out;
}

double bidirectional_min_mean(const Mat& d) {
  if (d.size() == 0) throw ShapeError("bidirectional_min_mean: empty matrix");
  return d.rowwise().minCoeff().mean() + d.colwise().minCoeff().mean();
}

double spatial_metric(const SpatialPrototypes& query, const SpatialPrototypes& support,
                      const HausdorffOptions& opts, Exec exec) {
  return bidirectional_min_mean(hausdorff_frame_matrix(query, support, opts, exec));
}

Mat frame_distance_matrix(const Mat& query_frames, const Mat& support_frames, DistanceKind kind) {
  return pairwise_distance(query_frames, support_frames, kind);
}

double bi_mhm_temporal(const Mat& d) { return bidirectional_min_mean(d); }

namespace {

// Predecessor cells of (i, j) in the padded lattice. Entering the first real
// column or the trailing pad diagonally would duplicate a horizontal step
// through a zero-cost pad cell, so those columns take vertical and horizontal
// moves only.
struct Preds {
  std::array<std::pair<Eigen::Index, Eigen::Index>, 3> cell{};
  int count = 0;
};

Preds predecessors(Eigen::Index i, Eigen::Index j, Eigen::Index last_col) {
  Preds p;
  auto push = [&](Eigen::Index r, Eigen::Index c) {
    if (r >= 0 && c >= 0) p.cell[static_cast<std::size_t>(p.count++)] = {r, c};
  };
  if (j == 0) {
    push(i - 1, 0);
  } else if (j == 1 || j == last_col) {
    push(i - 1, j);
    push(i, j - 1);
  } else {
    push(i - 1, j - 1);
    push(i, j - 1);
  }
  return p;
}

}  // namespace

OtamResult otam_one_way(const Mat& d, const SmoothMinConfig& cfg) {
  cfg.validate();
  if (d.size() == 0) throw ShapeError("otam: empty cost matrix");
  if ((d.array() < 0.0).any()) throw ShapeError("otam: cost matrix must be nonnegative");
  const Eigen::Index rows = d.rows();
  const Eigen::Index cols = d.cols() + 2;
  const Eigen::Index last = cols - 1;
  Mat padded = Mat::Zero(rows, cols);
  padded.middleCols(1, d.cols()) = d;

  Mat gamma(rows, cols);
  const double lambda = cfg.lambda;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      const Preds p = predecessors(i, j, last);
      if (p.count == 0) {
        gamma(i, j) = padded(i, j);
        continue;
      }
      double lo = std::numeric_limits<double>::infinity();
      for (int k = 0; k < p.count; ++k)
        lo = std::min(lo, gamma(p.cell[k].first, p.cell[k].second));
      double soft = lo;
      if (!cfg.hard) {
        double acc = 0.0;
        for (int k = 0; k < p.count; ++k)
          acc += std::exp(-(gamma(p.cell[k].first, p.cell[k].second) - lo) / lambda);
        soft = lo - lambda * std::log(acc);
      }
      gamma(i, j) = padded(i, j) + soft;
    }
  }

  OtamResult res;
  res.value = gamma(rows - 1, last);

  // Reverse sweep: every successor of (i, j) lies later in row-major order.
  Mat e = Mat::Zero(rows, cols);
  e(rows - 1, last) = 1.0;
  for (Eigen::Index i = rows; i-- > 0;) {
    for (Eigen::Index j = cols; j-- > 0;) {
      const double ej = e(i, j);
      if (ej == 0.0) continue;
      const Preds p = predecessors(i, j, last);
      if (p.count == 0) continue;
      const double reached = gamma(i, j) - padded(i, j);
      if (cfg.hard) {
        int best = 0;
        for (int k = 1; k < p.count; ++k)
          if (gamma(p.cell[k].first, p.cell[k].second) <
              gamma(p.cell[best].first, p.cell[best].second))
            best = k;
        e(p.cell[best].first, p.cell[best].second) += ej;
      } else {
        for (int k = 0; k < p.count; ++k) {
          const auto [r, c] = p.cell[k];
          e(r, c) += ej * std::exp(-(gamma(r, c) - reached) / lambda);
        }
      }
    }
  }
  res.grad = e.middleCols(1, d.cols());
  return res;
}

OtamResult otam_with_grad(const Mat& d, const SmoothMinConfig& cfg) {
  const OtamResult fwd = otam_one_way(d, cfg);
  const Mat dt = d.transpose();
  const OtamResult bwd = otam_one_way(dt, cfg);
  OtamResult res;
  res.value = 0.5 * (fwd.value + bwd.value);
  res.grad = 0.5 * (fwd.grad + bwd.grad.transpose());
  return res;
}

double otam(const Mat& d, const SmoothMinConfig& cfg) {
  return 0.5 * (otam_one_way(d, cfg).value + otam_one_way(d.transpose(), cfg).value);
}

double temporal_score(const Mat& query_frames, const Mat& support_frames, const MatchConfig& cfg) {
  const Mat d = frame_distance_matrix(query_frames, support_frames, cfg.frame_distance);
  return cfg.temporal == TemporalMetric::Otam ? otam(d, cfg.smooth) : bi_mhm_temporal(d);
}

PairScore score_pair(const ClassPrototypes& query, const ClassPrototypes& support,
                     const MatchConfig& cfg) {
  PairScore s;
  s.spatial = spatial_metric(query.spatial, support.spatial, cfg.hausdorff);
  s.temporal = temporal_score(query.frames, support.frames, cfg);
  s.fused = fuse(s.temporal, s.spatial, cfg.alpha);
  return s;
}

EpisodeScores match_episode(const std::vector<std::vector<ClassPrototypes>>& queries,
                            const std::vector<ClassPrototypes>& support, const MatchConfig& cfg,
                            Exec exec) {
  if (cfg.alpha < 0.0) throw ConfigError("match_episode: alpha must be >= 0");
  if (!(cfg.temperature > 0.0)) throw ConfigError("match_episode: temperature must be > 0");
  cfg.smooth.validate();
  const auto nq = static_cast<Eigen::Index>(queries.size());
  const auto m = static_cast<Eigen::Index>(support.size());
  for (const auto& row : queries)
    if (static_cast<Eigen::Index>(row.size()) != m)
      throw ShapeError("match_episode: each query needs one prototype set per class");

  EpisodeScores out;
  out.spatial.resize(nq, m);
  out.temporal.resize(nq, m);
  out.fused.resize(nq, m);
  out.logits.resize(nq, m);
  const Eigen::Index cells = nq * m;
  auto cell = [&](Eigen::Index k) {
    const Eigen::Index q = k / m;
    const Eigen::Index c = k % m;
    const PairScore s = score_pair(queries[static_cast<std::size_t>(q)][static_cast<std::size_t>(c)],
                                   support[static_cast<std::size_t>(c)], cfg);
    out.spatial(q, c) = s.spatial;
    out.temporal(q, c) = s.temporal;
    out.fused(q, c) = s.fused;
    out.logits(q, c) = -s.fused / cfg.temperature;
  };
  if (exec == Exec::Parallel) {
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (Eigen::Index k = 0; k < cells; ++k) {
      try {
        cell(k);
      } catch (...) {
#pragma omp critical(dist_match_failure)
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
  } else {
    for (Eigen::Index k = 0; k < cells; ++k) cell(k);
  }
  return out;
}

}  // namespace dist::metrics
