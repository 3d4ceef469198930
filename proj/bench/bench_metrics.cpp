// Serial kernels against their OpenMP counterparts.

#include "dist/metrics.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace dist;
using namespace dist::metrics;

namespace {

Mat gaussian(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n;
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ClassPrototypes protos(std::mt19937_64& rng, int t, int n, int c) {
  return {SpatialPrototypes(t, n, gaussian(rng, t * n, c)), gaussian(rng, t, c)};
}

void BM_HausdorffFrameMatrix(benchmark::State& state) {
  const int t = 8, n = static_cast<int>(state.range(0)), c = 512;
  const Exec exec = state.range(1) ? Exec::Parallel : Exec::Serial;
  std::mt19937_64 rng(1);
  const auto a = protos(rng, t, n, c), b = protos(rng, t, n, c);
  for (auto _ : state) benchmark::DoNotOptimize(hausdorff_frame_matrix(a.spatial, b.spatial, {}, exec));
}
BENCHMARK(BM_HausdorffFrameMatrix)->ArgsProduct({{3, 9, 16}, {0, 1}});

void BM_MatchEpisode(benchmark::State& state) {
  const int m = 5, nq = static_cast<int>(state.range(0)), t = 8, n = 9, c = 256;
  const Exec exec = state.range(1) ? Exec::Parallel : Exec::Serial;
  std::mt19937_64 rng(2);
  std::vector<ClassPrototypes> support;
  for (int k = 0; k < m; ++k) support.push_back(protos(rng, t, n, c));
  std::vector<std::vector<ClassPrototypes>> queries(static_cast<std::size_t>(nq));
  for (auto& row : queries)
    for (int k = 0; k < m; ++k) row.push_back(protos(rng, t, n, c));
  MatchConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(match_episode(queries, support, cfg, exec));
  state.SetItemsProcessed(state.iterations() * nq * m);
}
BENCHMARK(BM_MatchEpisode)->ArgsProduct({{5, 25}, {0, 1}});

void BM_Otam(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  std::mt19937_64 rng(3);
  const Mat d = gaussian(rng, t, t).cwiseAbs();
  for (auto _ : state) benchmark::DoNotOptimize(otam_with_grad(d, {}));
}
BENCHMARK(BM_Otam)->Arg(8)->Arg(16)->Arg(32);

}  // namespace

BENCHMARK_MAIN();
