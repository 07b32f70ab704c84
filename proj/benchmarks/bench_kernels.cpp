#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "relusparse/linalg.hpp"

namespace {

using namespace relusparse;

DenseMatrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    DenseMatrix w(rows, cols);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : w.data) v = dist(rng);
    return w;
}

std::vector<double> random_input(std::size_t dim, double sparsity, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::bernoulli_distribution drop(sparsity);
    std::vector<double> x(dim);
    for (auto& v : x) v = drop(rng) ? 0.0 : dist(rng);
    return x;
}

void BM_matvec_dense(benchmark::State& state) {
    const auto dim = static_cast<std::size_t>(state.range(0));
    const auto w = random_matrix(dim, dim, 1);
    const auto x = random_input(dim, 0.0, 2);
    for (auto _ : state) {
        auto y = matvec_dense(w, x);
        benchmark::DoNotOptimize(y);
    }
}
BENCHMARK(BM_matvec_dense)->Arg(256)->Arg(1024);

void BM_matvec_sparse(benchmark::State& state) {
    const auto dim = static_cast<std::size_t>(state.range(0));
    const double sparsity = static_cast<double>(state.range(1)) / 100.0;
    const auto w = random_matrix(dim, dim, 1);
    const auto x = sparsify(random_input(dim, sparsity, 2));
    for (auto _ : state) {
        auto y = matvec_sparse(w, x);
        benchmark::DoNotOptimize(y);
    }
}
BENCHMARK(BM_matvec_sparse)->Args({1024, 0})->Args({1024, 50})->Args({1024, 90})->Args({1024, 97});

}  // namespace

BENCHMARK_MAIN();
