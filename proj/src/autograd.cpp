#include "dist/autograd.hpp"

#include <cmath>
#include <numbers>

namespace dist {

std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

double CounterRng::gaussian() {
  // Box-Muller; one draw per call keeps the stream position simple.
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Mat gaussian_matrix(std::uint64_t key, Eigen::Index rows, Eigen::Index cols,
                    double stddev) {
  CounterRng rng(key);
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * rng.gaussian();
  return m;
}

}  // namespace dist

namespace dist::ad {

const Mat& Var::value() const { return graph->value(*this); }

double Var::scalar() const {
  const Mat& v = value();
  if (v.size() != 1) throw ShapeError("Var::scalar on non 1x1 value");
  return v(0, 0);
}

Var Graph::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var{this, nodes_.size() - 1};
}

Var Graph::input(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, {}, grad_enabled_});
  return Var{this, nodes_.size() - 1};
}

Var Graph::param(Parameter& p) {
  Var v = input(p.value);
  if (grad_enabled_) bound_params_.emplace_back(v.id, &p);
  return v;
}

Var Graph::record(Mat value, std::initializer_list<Var> inputs, Backward bw) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(bw));
}

Var Graph::record(Mat value, std::span<const Var> inputs, Backward bw) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.graph != this) throw ShapeError("Var used with a foreign graph");
      needs = needs || nodes_[in.id].requires_grad;
    }
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Graph::accumulate(Var v, const Mat& g) {
  auto& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Mat Graph::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::backward(Var output) {
  if (!grad_enabled_) throw Error("backward() on a graph without gradients");
  if (value(output).size() != 1) throw ShapeError("backward() needs a scalar output");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[output.id].grad = Mat::Ones(1, 1);
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    const Mat g = n.grad;
    n.backward(*this, g);
  }
  for (auto& [id, p] : bound_params_) {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) continue;
    if (p->grad.size() == 0) p->grad = Mat::Zero(p->value.rows(), p->value.cols());
    p->grad += n.grad;
  }
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Graph& g = *a.graph;
  return g.record(a.value() * b.value(), {a, b}, [a, b](Graph& gr, const Mat& d) {
    gr.accumulate(a, d * b.value().transpose());
    gr.accumulate(b, a.value().transpose() * d);
  });
}

Var matmul_nt(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt: feature dimensions differ");
  Graph& g = *a.graph;
  return g.record(a.value() * b.value().transpose(), {a, b},
                  [a, b](Graph& gr, const Mat& d) {
                    gr.accumulate(a, d * b.value());
                    gr.accumulate(b, d.transpose() * a.value());
                  });
}

Var transpose(Var a) {
  return a.graph->record(a.value().transpose(), {a}, [a](Graph& gr, const Mat& d) {
    gr.accumulate(a, d.transpose());
  });
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return a.graph->record(a.value() + b.value(), {a, b}, [a, b](Graph& gr, const Mat& d) {
    gr.accumulate(a, d);
    gr.accumulate(b, d);
  });
}

Var sub(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return a.graph->record(a.value() - b.value(), {a, b}, [a, b](Graph& gr, const Mat& d) {
    gr.accumulate(a, d);
    gr.accumulate(b, -d);
  });
}

Var scale(Var a, double s) {
  return a.graph->record(a.value() * s, {a},
                         [a, s](Graph& gr, const Mat& d) { gr.accumulate(a, d * s); });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape mismatch");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return a.graph->record(std::move(out), {a, row}, [a, row](Graph& gr, const Mat& d) {
    gr.accumulate(a, d);
    gr.accumulate(row, d.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: row shape mismatch");
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return a.graph->record(std::move(out), {a, row}, [a, row](Graph& gr, const Mat& d) {
    Mat da = d.array().rowwise() * row.value().row(0).array();
    gr.accumulate(a, da);
    Mat dr = (d.array() * a.value().array()).colwise().sum();
    gr.accumulate(row, dr);
  });
}

Var mean_rows(Var a) {
  require(a.rows() > 0, "mean_rows: empty input");
  const double n = static_cast<double>(a.rows());
  Mat out = a.value().colwise().mean();
  return a.graph->record(std::move(out), {a}, [a, n](Graph& gr, const Mat& d) {
    Mat da = d.replicate(a.rows(), 1) / n;
    gr.accumulate(a, da);
  });
}

Var max_rows(Var a) {
  require(a.rows() > 0, "max_rows: empty input");
  const Mat& v = a.value();
  Mat out(1, v.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.cols()));
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index r = 0;
    out(0, c) = v.col(c).maxCoeff(&r);
    arg[static_cast<std::size_t>(c)] = r;
  }
  return a.graph->record(std::move(out), {a},
                         [a, arg = std::move(arg)](Graph& gr, const Mat& d) {
                           Mat da = Mat::Zero(a.rows(), a.cols());
                           for (Eigen::Index c = 0; c < da.cols(); ++c)
                             da(arg[static_cast<std::size_t>(c)], c) = d(0, c);
                           gr.accumulate(a, da);
                         });
}

Var softmax_rows(Var a) {
  Mat s = a.value();
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
  Mat sv = s;
  return a.graph->record(std::move(s), {a}, [a, sv = std::move(sv)](Graph& gr, const Mat& d) {
    Mat da(sv.rows(), sv.cols());
    for (Eigen::Index r = 0; r < sv.rows(); ++r) {
      const double dot = d.row(r).dot(sv.row(r));
      da.row(r) = (sv.row(r).array() * (d.row(r).array() - dot)).matrix();
    }
    gr.accumulate(a, da);
  });
}

Var gelu(Var a) {
  // tanh approximation
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c3 = 0.044715;
  const Mat& x = a.value();
  Mat out = x.unaryExpr([&](double v) {
    return 0.5 * v * (1.0 + std::tanh(k * (v + c3 * v * v * v)));
  });
  return a.graph->record(std::move(out), {a}, [a](Graph& gr, const Mat& d) {
    const Mat& xv = a.value();
    Mat da = xv.unaryExpr([&](double v) {
      const double u = k * (v + c3 * v * v * v);
      const double t = std::tanh(u);
      const double du = k * (1.0 + 3.0 * c3 * v * v);
      return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    gr.accumulate(a, Mat(da.array() * d.array()));
  });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == a.cols(), "layer_norm: gamma shape");
  require(beta.rows() == 1 && beta.cols() == a.cols(), "layer_norm: beta shape");
  const Mat& x = a.value();
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  Mat xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return a.graph->record(
      std::move(out), {a, gamma, beta},
      [a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& gr, const Mat& d) {
        const Eigen::Index cc = xhat.cols();
        gr.accumulate(beta, d.colwise().sum());
        gr.accumulate(gamma, Mat((d.array() * xhat.array()).colwise().sum()));
        Mat dxhat = d.array().rowwise() * gamma.value().row(0).array();
        Mat da(xhat.rows(), cc);
        for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
          const double mean_d = dxhat.row(r).mean();
          const double mean_dx = (dxhat.row(r).array() * xhat.row(r).array()).mean();
          da.row(r) = inv_std(r) *
                      (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
        }
        gr.accumulate(a, da);
      });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Mat out = a.value().middleCols(start, count);
  return a.graph->record(std::move(out), {a}, [a, start](Graph& gr, const Mat& d) {
    gr.accumulate_block(a, 0, start, d);
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Mat out = a.value().middleRows(start, count);
  return a.graph->record(std::move(out), {a}, [a, start](Graph& gr, const Mat& d) {
    gr.accumulate_block(a, start, 0, d);
  });
}

Var hcat(std::span<const Var> parts) {
  require(!parts.empty(), "hcat: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "hcat: row count mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return parts[0].graph->record(std::move(out), parts,
                                [keep = std::move(keep)](Graph& gr, const Mat& d) {
                                  Eigen::Index c0 = 0;
                                  for (const Var& p : keep) {
                                    gr.accumulate(p, d.middleCols(c0, p.cols()));
                                    c0 += p.cols();
                                  }
                                });
}

Var vcat(std::span<const Var> parts) {
  require(!parts.empty(), "vcat: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "vcat: column count mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return parts[0].graph->record(std::move(out), parts,
                                [keep = std::move(keep)](Graph& gr, const Mat& d) {
                                  Eigen::Index r0 = 0;
                                  for (const Var& p : keep) {
                                    gr.accumulate(p, d.middleRows(r0, p.rows()));
                                    r0 += p.rows();
                                  }
                                });
}

Var mean_of(std::span<const Var> parts) {
  require(!parts.empty(), "mean_of: no inputs");
  if (parts.size() == 1) return parts[0];
  Mat out = parts[0].value();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    require(parts[i].rows() == out.rows() && parts[i].cols() == out.cols(),
            "mean_of: shape mismatch");
    out += parts[i].value();
  }
  const double n = static_cast<double>(parts.size());
  out /= n;
  std::vector<Var> keep(parts.begin(), parts.end());
  return parts[0].graph->record(std::move(out), parts,
                                [keep = std::move(keep), n](Graph& gr, const Mat& d) {
                                  const Mat share = d / n;
                                  for (const Var& p : keep) gr.accumulate(p, share);
                                });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->record(std::move(out), {a}, [a](Graph& gr, const Mat& d) {
    gr.accumulate(a, Mat::Constant(a.rows(), a.cols(), d(0, 0)));
  });
}

Var weighted_sum(Var a, const Mat& w) {
  require(w.rows() == a.rows() && w.cols() == a.cols(), "weighted_sum: shape mismatch");
  Mat out(1, 1);
  out(0, 0) = (a.value().array() * w.array()).sum();
  return a.graph->record(std::move(out), {a}, [a, w](Graph& gr, const Mat& d) {
    gr.accumulate(a, w * d(0, 0));
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Mat& z = logits.value();
  require(static_cast<std::size_t>(z.rows()) == labels.size(),
          "cross_entropy: one label per row required");
  const Eigen::Index n = z.rows();
  Mat probs(n, z.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < z.cols(), "cross_entropy: label out of range");
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    probs.row(r) = (z.row(r).array() - lse).exp().matrix();
    loss += lse - z(r, y);
  }
  Mat out(1, 1);
  out(0, 0) = loss / static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.graph->record(
      std::move(out), {logits},
      [logits, probs = std::move(probs), ys = std::move(ys)](Graph& gr, const Mat& d) {
        Mat dz = probs;
        for (std::size_t r = 0; r < ys.size(); ++r)
          dz(static_cast<Eigen::Index>(r), ys[r]) -= 1.0;
        dz *= d(0, 0) / static_cast<double>(ys.size());
        gr.accumulate(logits, dz);
      });
}

Var attention(Var queries, Var keys, Var values, int heads, bool scaled,
              std::vector<Var>* weights_out) {
  require(heads >= 1, "attention: heads must be >= 1");
  require(queries.cols() == keys.cols(), "attention: query/key width mismatch");
  require(keys.rows() == values.rows(), "attention: key/value count mismatch");
  const Eigen::Index width = queries.cols();
  require(width % heads == 0 && values.cols() % heads == 0,
          "attention: width not divisible by heads");
  const Eigen::Index dk = width / heads;
  const Eigen::Index dv = values.cols() / heads;
  const double factor = scaled ? 1.0 / std::sqrt(static_cast<double>(dk)) : 1.0;
  if (heads == 1) {
    Var logits = matmul_nt(queries, keys);
    if (scaled) logits = scale(logits, factor);
    Var w = softmax_rows(logits);
    if (weights_out) weights_out->push_back(w);
    return matmul(w, values);
  }
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var q = slice_cols(queries, h * dk, dk);
    Var k = slice_cols(keys, h * dk, dk);
    Var v = slice_cols(values, h * dv, dv);
    Var logits = matmul_nt(q, k);
    if (scaled) logits = scale(logits, factor);
    Var w = softmax_rows(logits);
    if (weights_out) weights_out->push_back(w);
    outs.push_back(matmul(w, v));
  }
  return hcat(outs);
}

}  // namespace dist::ad
