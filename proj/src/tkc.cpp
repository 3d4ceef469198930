#include "dist/tkc.hpp"

#include <cmath>
#include <string>

namespace dist::tkc {

void TkcConfig::validate(int dim) const {
  if (frames < 1) throw ConfigError("tkc: frames must be >= 1");
  if (heads < 1 || dim % heads != 0) throw ConfigError("tkc.heads must divide the feature dim");
  if (blocks < 0) throw ConfigError("tkc.blocks must be >= 0");
  if (ffn_mult < 1) throw ConfigError("tkc.ffn_mult must be >= 1");
  if (!(residual_init_std >= 0.0)) throw ConfigError("tkc.residual_init_std must be >= 0");
}

namespace {

ad::Parameter gauss(const std::string& name, std::uint64_t seed, Eigen::Index rows,
                    Eigen::Index cols, double stddev) {
  return {name, gaussian_matrix(CounterRng::mix(seed ^ fnv1a64(name)), rows, cols, stddev), {}};
}

ad::Parameter fill(const std::string& name, Eigen::Index rows, Eigen::Index cols, double v) {
  return {name, Mat::Constant(rows, cols, v), {}};
}

}  // namespace

TkcParams TkcParams::init(int dim, const TkcConfig& cfg, std::uint64_t seed) {
  cfg.validate(dim);
  const double w = 1.0 / std::sqrt(static_cast<double>(dim));
  const int hidden = dim * cfg.ffn_mult;
  TkcParams p;
  p.attr_key = gauss("tkc.attr_key", seed, dim, dim, w);
  p.attr_value = gauss("tkc.attr_value", seed, dim, dim, w);
  p.positions = gauss("tkc.positions", seed, cfg.frames, dim, cfg.position_init_std);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string pre = "tkc.block" + std::to_string(b) + ".";
    BlockParams bp;
    bp.norm1_gain = fill(pre + "norm1_gain", 1, dim, 1.0);
    bp.norm1_bias = fill(pre + "norm1_bias", 1, dim, 0.0);
    bp.query = gauss(pre + "query", seed, dim, dim, w);
    bp.key = gauss(pre + "key", seed, dim, dim, w);
    bp.value = gauss(pre + "value", seed, dim, dim, w);
    bp.output = gauss(pre + "output", seed, dim, dim, cfg.residual_init_std);
    bp.norm2_gain = fill(pre + "norm2_gain", 1, dim, 1.0);
    bp.norm2_bias = fill(pre + "norm2_bias", 1, dim, 0.0);
    bp.hidden = gauss(pre + "hidden", seed, dim, hidden, w);
    bp.hidden_bias = fill(pre + "hidden_bias", 1, hidden, 0.0);
    bp.proj = gauss(pre + "proj", seed, hidden, dim, cfg.residual_init_std);
    bp.proj_bias = fill(pre + "proj_bias", 1, dim, 0.0);
    p.blocks.push_back(std::move(bp));
  }
  return p;
}

std::vector<ad::Parameter*> TkcParams::all() {
  std::vector<ad::Parameter*> out{&attr_key, &attr_value, &positions};
  for (auto& b : blocks) {
    for (ad::Parameter* q : {&b.norm1_gain, &b.norm1_bias, &b.query, &b.key, &b.value, &b.output,
                             &b.norm2_gain, &b.norm2_bias, &b.hidden, &b.hidden_bias, &b.proj,
                             &b.proj_bias})
      out.push_back(q);
  }
  return out;
}

TkcVars bind(ad::Graph& g, TkcParams& p) {
  TkcVars v{g.param(p.attr_key), g.param(p.attr_value), g.param(p.positions), {}};
  for (auto& b : p.blocks) {
    v.blocks.push_back({g.param(b.norm1_gain), g.param(b.norm1_bias), g.param(b.query),
                        g.param(b.key), g.param(b.value), g.param(b.output),
                        g.param(b.norm2_gain), g.param(b.norm2_bias), g.param(b.hidden),
                        g.param(b.hidden_bias), g.param(b.proj), g.param(b.proj_bias)});
  }
  return v;
}

ad::Var pool_temporal_attributes(ad::Var attrs, Pool pool) {
  if (attrs.rows() < 1) throw ShapeError("pool_temporal_attributes: no attributes");
  return pool == Pool::Mean ? ad::mean_rows(attrs) : ad::max_rows(attrs);
}

ad::Var fuse_global(ad::Var frames, ad::Var global) { return ad::add_row(frames, global); }

ad::Var inject_temporal_attributes(ad::Var frames, ad::Var attrs, ad::Var wk, ad::Var wv,
                                   const TkcConfig& cfg, ad::Var* weights) {
  ad::Var keys = ad::matmul(attrs, wk);
  ad::Var values = ad::matmul(attrs, wv);
  std::vector<ad::Var> w;
  ad::Var out = ad::attention(frames, keys, values, 1, !cfg.literal_unscaled, weights ? &w : nullptr);
  if (weights) *weights = w.front();
  return ad::add(out, frames);
}

ad::Var temporal_transformer(ad::Var frames, const TkcVars& v, const TkcConfig& cfg) {
  if (frames.rows() != v.positions.rows())
    throw ShapeError("temporal_transformer: frame count differs from the positional table");
  ad::Var h = ad::add(frames, v.positions);
  for (const BlockVars& b : v.blocks) {
    ad::Var n1 = ad::layer_norm_rows(h, b.norm1_gain, b.norm1_bias);
    ad::Var att = ad::attention(ad::matmul(n1, b.query), ad::matmul(n1, b.key),
                                ad::matmul(n1, b.value), cfg.heads, true);
    h = ad::add(h, ad::matmul(att, b.output));
    ad::Var n2 = ad::layer_norm_rows(h, b.norm2_gain, b.norm2_bias);
    ad::Var mid = ad::gelu(ad::add_row(ad::matmul(n2, b.hidden), b.hidden_bias));
    h = ad::add(h, ad::add_row(ad::matmul(mid, b.proj), b.proj_bias));
  }
  return h;
}

ad::Var tkc_forward(ad::Var frames, ad::Var attrs, const TkcVars& v, const TkcConfig& cfg,
                    TkcTrace* trace) {
  ad::Var global = pool_temporal_attributes(attrs, cfg.pool);
  ad::Var fused = fuse_global(frames, global);
  ad::Var w;
  ad::Var injected =
      inject_temporal_attributes(fused, attrs, v.attr_key, v.attr_value, cfg, trace ? &w : nullptr);
  if (trace) trace->attr_weights = w;
  return temporal_transformer(injected, v, cfg);
}

Mat tkc_forward(TkcParams& p, const Mat& frames, const Mat& temporal_attrs, const TkcConfig& cfg,
                Mat* attr_weights) {
  ad::Graph g(false);
  const TkcVars v = bind(g, p);
  TkcTrace trace;
  ad::Var out = tkc_forward(g.constant(frames), g.constant(temporal_attrs), v, cfg,
                            attr_weights ? &trace : nullptr);
  if (attr_weights) *attr_weights = trace.attr_weights.value();
  return out.value();
}

}  // namespace dist::tkc
