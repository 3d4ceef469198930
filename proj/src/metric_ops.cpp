#include "dist/metric_ops.hpp"

namespace dist::ad {

using metrics::DistanceKind;

void pairwise_distance_backward(const Mat& a, const Mat& b, const Mat& upstream,
                                DistanceKind kind, Mat& da, Mat& db) {
  da = Mat::Zero(a.rows(), a.cols());
  db = Mat::Zero(b.rows(), b.cols());
  if (kind == DistanceKind::Euclidean) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.rows(); ++j) {
        const RowVec diff = a.row(i) - b.row(j);
        const double n = diff.norm();
        if (n == 0.0) continue;
        const RowVec g = upstream(i, j) / n * diff;
        da.row(i) += g;
        db.row(j) -= g;
      }
    }
    return;
  }
  const Eigen::VectorXd na = a.rowwise().norm();
  const Eigen::VectorXd nb = b.rowwise().norm();
  const Mat ah = a.array().colwise() / na.array();
  const Mat bh = b.array().colwise() / nb.array();
  const Mat sim = ah * bh.transpose();
  const Mat gs = upstream.array() * sim.array();
  // d(1 - cos)/da_i = -(bh_j - cos_ij * ah_i) / |a_i|
  const Eigen::VectorXd ra = gs.rowwise().sum();
  const Eigen::VectorXd rb = gs.colwise().sum().transpose();
  da = ra.asDiagonal() * ah - upstream * bh;
  da.array().colwise() /= na.array();
  db = rb.asDiagonal() * bh - upstream.transpose() * ah;
  db.array().colwise() /= nb.array();
}

Var pairwise_distance(Var a, Var b, DistanceKind kind) {
  return a.graph->record(metrics::pairwise_distance(a.value(), b.value(), kind), {a, b},
                         [a, b, kind](Graph& gr, const Mat& d) {
                           Mat da, db;
                           pairwise_distance_backward(a.value(), b.value(), d, kind, da, db);
                           gr.accumulate(a, da);
                           gr.accumulate(b, db);
                         });
}

namespace {

// Upstream gradient of a (normalized) bidirectional min-mean over `dist`,
// scaled by g. Ties resolve to the first minimum, matching minCoeff.
Mat min_mean_backward(const Mat& dist, double g, bool normalize) {
  Mat out = Mat::Zero(dist.rows(), dist.cols());
  const double wr = normalize ? g / static_cast<double>(dist.rows()) : g;
  const double wc = normalize ? g / static_cast<double>(dist.cols()) : g;
  for (Eigen::Index i = 0; i < dist.rows(); ++i) {
    Eigen::Index j = 0;
    dist.row(i).minCoeff(&j);
    out(i, j) += wr;
  }
  for (Eigen::Index j = 0; j < dist.cols(); ++j) {
    Eigen::Index i = 0;
    dist.col(j).minCoeff(&i);
    out(i, j) += wc;
  }
  return out;
}

}  // namespace

Var hausdorff_matrix(Var query, Var support, int protos,
                     const metrics::HausdorffOptions& opts) {
  if (protos < 1 || query.rows() % protos != 0 || support.rows() % protos != 0)
    throw ShapeError("hausdorff_matrix: rows must be a multiple of protos");
  const int tq = static_cast<int>(query.rows() / protos);
  const int ts = static_cast<int>(support.rows() / protos);
  const metrics::SpatialPrototypes q(tq, protos, query.value());
  const metrics::SpatialPrototypes s(ts, protos, support.value());
  Mat value = metrics::hausdorff_frame_matrix(q, s, opts);
  return query.graph->record(
      std::move(value), {query, support},
      [query, support, protos, tq, ts, opts](Graph& gr, const Mat& d) {
        const Mat& qv = query.value();
        const Mat& sv = support.value();
        Mat dq = Mat::Zero(qv.rows(), qv.cols());
        Mat ds = Mat::Zero(sv.rows(), sv.cols());
        for (int i = 0; i < tq; ++i) {
          const Mat qi = qv.middleRows(static_cast<Eigen::Index>(i) * protos, protos);
          for (int j = 0; j < ts; ++j) {
            if (d(i, j) == 0.0) continue;
            const Mat sj = sv.middleRows(static_cast<Eigen::Index>(j) * protos, protos);
            const Mat dist = metrics::pairwise_distance(qi, sj, opts.distance);
            const Mat up = min_mean_backward(dist, d(i, j), opts.normalize);
            Mat da, db;
            pairwise_distance_backward(qi, sj, up, opts.distance, da, db);
            dq.middleRows(static_cast<Eigen::Index>(i) * protos, protos) += da;
            ds.middleRows(static_cast<Eigen::Index>(j) * protos, protos) += db;
          }
        }
        gr.accumulate(query, dq);
        gr.accumulate(support, ds);
      });
}

Var bidirectional_min_mean(Var d) {
  Mat out(1, 1);
  out(0, 0) = metrics::bidirectional_min_mean(d.value());
  return d.graph->record(std::move(out), {d}, [d](Graph& gr, const Mat& up) {
    gr.accumulate(d, min_mean_backward(d.value(), up(0, 0), true));
  });
}

Var otam(Var d, const metrics::SmoothMinConfig& cfg) {
  metrics::OtamResult r = metrics::otam_with_grad(d.value(), cfg);
  Mat out(1, 1);
  out(0, 0) = r.value;
  return d.graph->record(std::move(out), {d}, [d, grad = std::move(r.grad)](Graph& gr, const Mat& up) {
    gr.accumulate(d, grad * up(0, 0));
  });
}

}  // namespace dist::ad
