// Serial vs OpenMP matmul kernels, and the aggregation strategies.

#include <benchmark/benchmark.h>

#include <random>

#include "hfl/aggregate.hpp"
#include "hfl/kernels.hpp"

namespace {

hfl::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    hfl::Matrix m(rows, cols);
    for (auto& v : m.values()) v = dist(rng);
    return m;
}

void bm_matmul_serial(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(hfl::kernels::serial::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void bm_matmul_parallel(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    hfl::kernels::set_threads(static_cast<int>(state.range(1)));
    const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(hfl::kernels::parallel::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void bm_matmul_nt_serial(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, n, 3), b = random_matrix(n, n, 4);
    for (auto _ : state) benchmark::DoNotOptimize(hfl::kernels::serial::matmul_nt(a, b));
}

void bm_matmul_nt_parallel(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    hfl::kernels::set_threads(static_cast<int>(state.range(1)));
    const auto a = random_matrix(n, n, 3), b = random_matrix(n, n, 4);
    for (auto _ : state) benchmark::DoNotOptimize(hfl::kernels::parallel::matmul_nt(a, b));
}

// Eight clients with ranks 4..64 on one 128 x 128 target.
struct AggregationInput {
    std::vector<hfl::AdapterSet> sets;
    hfl::AggregationWeights weights;
};

AggregationInput aggregation_input(bool equal_ranks) {
    AggregationInput in;
    std::vector<std::size_t> counts;
    const std::size_t ranks[] = {4, 8, 16, 32, 64, 16, 8, 4};
    for (int k = 0; k < 8; ++k) {
        const std::size_t r = equal_ranks ? 16 : ranks[k];
        hfl::AdapterSet s;
        s.client_id = k;
        s.rank = r;
        s.adapters.emplace("w", hfl::LoraAdapter{"w", random_matrix(128, r, 10 + k), random_matrix(r, 128, 20 + k)});
        in.sets.push_back(std::move(s));
        counts.push_back(100 + 10 * static_cast<std::size_t>(k));
    }
    in.weights = hfl::compute_weights(counts);
    return in;
}

void bm_aggregate(benchmark::State& state) {
    const auto strategy = static_cast<hfl::Strategy>(state.range(0));
    const auto in = aggregation_input(strategy == hfl::Strategy::Naive);
    hfl::kernels::set_threads(1);
    for (auto _ : state) benchmark::DoNotOptimize(hfl::aggregate(strategy, in.sets, in.weights));
    state.SetLabel(hfl::to_string(strategy));
}

}  // namespace

BENCHMARK(bm_matmul_serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_parallel)->ArgsProduct({{64, 128, 256}, {1, 2, 4}})->UseRealTime();
BENCHMARK(bm_matmul_nt_serial)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_nt_parallel)->ArgsProduct({{128, 256}, {1, 2, 4}})->UseRealTime();
BENCHMARK(bm_aggregate)
    ->Arg(static_cast<int>(hfl::Strategy::Stacking))
    ->Arg(static_cast<int>(hfl::Strategy::Reference))
    ->Arg(static_cast<int>(hfl::Strategy::ZeroPad))
    ->Arg(static_cast<int>(hfl::Strategy::Naive));

BENCHMARK_MAIN();
