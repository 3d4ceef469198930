#include "dist/skc.hpp"

#include <cmath>

namespace dist::skc {

void SkcConfig::validate(int dim) const {
  if (prototypes < 1) throw ConfigError("skc.num_prototypes must be >= 1");
  if (heads < 1 || dim % heads != 0) throw ConfigError("skc.heads must divide the feature dim");
}

namespace {

ad::Parameter make(const std::string& name, std::uint64_t seed, Eigen::Index rows,
                   Eigen::Index cols, double stddev) {
  return {name, gaussian_matrix(CounterRng::mix(seed ^ fnv1a64(name)), rows, cols, stddev), {}};
}

}  // namespace

SkcParams SkcParams::init(int dim, const SkcConfig& cfg, std::uint64_t seed) {
  cfg.validate(dim);
  const double w = 1.0 / std::sqrt(static_cast<double>(dim));
  SkcParams p;
  p.prototypes = make("skc.prototypes", seed, cfg.prototypes, dim, cfg.prototype_init_std);
  p.self_query = make("skc.self_query", seed, dim, dim, w);
  p.self_key = make("skc.self_key", seed, dim, dim, w);
  p.self_value = make("skc.self_value", seed, dim, dim, w);
  p.patch_key = make("skc.patch_key", seed, dim, dim, w);
  p.patch_value = make("skc.patch_value", seed, dim, dim, w);
  p.attr_key = make("skc.attr_key", seed, dim, dim, w);
  p.attr_value = make("skc.attr_value", seed, dim, dim, w);
  return p;
}

std::vector<ad::Parameter*> SkcParams::all() {
  return {&prototypes, &self_query, &self_key, &self_value,
          &patch_key, &patch_value, &attr_key, &attr_value};
}

std::vector<const ad::Parameter*> SkcParams::all() const {
  return {&prototypes, &self_query, &self_key, &self_value,
          &patch_key, &patch_value, &attr_key, &attr_value};
}

SkcVars bind(ad::Graph& g, SkcParams& p) {
  return {g.param(p.prototypes), g.param(p.self_query), g.param(p.self_key),
          g.param(p.self_value), g.param(p.patch_key), g.param(p.patch_value),
          g.param(p.attr_key),   g.param(p.attr_value)};
}

namespace {

ad::Var cross_attend(ad::Var queries, ad::Var source, ad::Var wk, ad::Var wv,
                     const SkcConfig& cfg, ad::Var* weights) {
  ad::Var keys = ad::matmul(source, wk);
  ad::Var values = ad::matmul(source, wv);
  std::vector<ad::Var> w;
  ad::Var out = ad::attention(queries, keys, values, cfg.heads, !cfg.literal_unscaled,
                              weights ? &w : nullptr);
  if (weights) *weights = w.size() == 1 ? w.front() : ad::mean_of(w);
  return ad::add(out, queries);
}

}  // namespace

ad::Var prototype_self_attention(ad::Var protos, ad::Var wq, ad::Var wk, ad::Var wv,
                                 const SkcConfig& cfg, ad::Var* weights) {
  ad::Var q = ad::matmul(protos, wq);
  ad::Var k = ad::matmul(protos, wk);
  ad::Var v = ad::matmul(protos, wv);
  std::vector<ad::Var> w;
  ad::Var out = ad::attention(q, k, v, cfg.heads, !cfg.literal_unscaled, weights ? &w : nullptr);
  if (weights) *weights = w.size() == 1 ? w.front() : ad::mean_of(w);
  return ad::add(out, protos);
}

ad::Var patch_aggregate(ad::Var protos, ad::Var patches, ad::Var wk, ad::Var wv,
                        const SkcConfig& cfg, ad::Var* weights) {
  return cross_attend(protos, patches, wk, wv, cfg, weights);
}

ad::Var inject_spatial_attributes(ad::Var protos, ad::Var attrs, ad::Var wk, ad::Var wv,
                                  const SkcConfig& cfg, ad::Var* weights) {
  return cross_attend(protos, attrs, wk, wv, cfg, weights);
}

std::vector<ad::Var> aggregate_frames(const SkcVars& v, std::span<const ad::Var> frame_patches,
                                      const SkcConfig& cfg, SkcTrace* trace) {
  if (frame_patches.empty()) throw ShapeError("skc: no frames");
  ad::Var self_w;
  ad::Var base = prototype_self_attention(v.prototypes, v.self_query, v.self_key, v.self_value,
                                          cfg, trace ? &self_w : nullptr);
  if (trace) trace->self_weights = self_w;
  std::vector<ad::Var> out;
  out.reserve(frame_patches.size());
  for (const ad::Var& x : frame_patches) {
    ad::Var w;
    out.push_back(patch_aggregate(base, x, v.patch_key, v.patch_value, cfg, trace ? &w : nullptr));
    if (trace) trace->patch_weights.push_back(w);
  }
  return out;
}

ad::Var inject_frames(const SkcVars& v, std::span<const ad::Var> aggregated, ad::Var attrs,
                      const SkcConfig& cfg, SkcTrace* trace) {
  std::vector<ad::Var> frames;
  frames.reserve(aggregated.size());
  for (const ad::Var& p : aggregated) {
    ad::Var w;
    frames.push_back(
        inject_spatial_attributes(p, attrs, v.attr_key, v.attr_value, cfg, trace ? &w : nullptr));
    if (trace) trace->attr_weights.push_back(w);
  }
  return ad::vcat(frames);
}

ad::Var stack_frames(std::span<const ad::Var> aggregated) { return ad::vcat(aggregated); }

ad::Var skc_forward(const SkcVars& v, std::span<const ad::Var> frame_patches, ad::Var attrs,
                    const SkcConfig& cfg, SkcTrace* trace) {
  const std::vector<ad::Var> agg = aggregate_frames(v, frame_patches, cfg, trace);
  return inject_frames(v, agg, attrs, cfg, trace);
}

metrics::SpatialPrototypes skc_forward(SkcParams& p, const std::vector<Mat>& frame_patches,
                                       const Mat& spatial_attrs, const SkcConfig& cfg) {
  ad::Graph g(false);
  const SkcVars v = bind(g, p);
  std::vector<ad::Var> xs;
  xs.reserve(frame_patches.size());
  for (const Mat& x : frame_patches) xs.push_back(g.constant(x));
  ad::Var out = skc_forward(v, xs, g.constant(spatial_attrs), cfg);
  return metrics::SpatialPrototypes(static_cast<int>(frame_patches.size()), cfg.prototypes,
                                    out.value());
}

}  // namespace dist::skc
