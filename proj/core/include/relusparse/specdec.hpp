#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace relusparse {

/// gamma -> average aggregated sparsity over a draft of that length.
/// Must be non-increasing in gamma for the optimality claims to hold.
using SparsityCurve = std::function<double(std::size_t)>;

/// Latency gain of sparse speculative decoding over the standard version:
/// (c*gamma + 1) / (c*gamma + (1 - s)).
double thm1_speedup(double c, std::size_t gamma, double s);

/// Mean tokens emitted per verification round under i.i.d. Bernoulli(alpha)
/// acceptance: (1 - alpha^(gamma+1)) / (1 - alpha).
double expected_tokens(double alpha, std::size_t gamma);

/// Gain of sparse speculative decoding over plain autoregressive decoding:
/// (1 - alpha^(gamma+1)) / ((c*gamma + (1 - s)) * (1 - alpha)).
double thm2_speedup(double alpha, double c, std::size_t gamma, double s);

/// Exhaustive argmax of thm2_speedup over integer gamma in [1, gamma_max],
/// ties broken toward smaller gamma.
std::size_t optimal_gamma(double alpha, double c, const SparsityCurve& s_agg,
                          std::size_t gamma_max);

struct SpecDecParams {
    double alpha = 0.0;
    double c = 0.0;
    std::size_t gamma = 1;
    SparsityCurve s_agg;
    double unit_latency = 1.0;  // T; cancels in every speedup ratio
};

struct SimResult {
    double mean_tokens_per_round = 0.0;
    double speedup_over_standard = 0.0;      // empirical thm1 ratio
    double speedup_over_autoregressive = 0.0; // empirical thm2 ratio
    std::uint64_t rounds = 0;
};

/// Monte-Carlo rounds: each of the gamma draft tokens is accepted i.i.d.
/// with probability alpha; a round yields accepted-prefix + 1 tokens,
/// capped at gamma + 1. Latency per round is c*gamma*T + (1 - s_agg(gamma))*T.
SimResult simulate_rounds(const SpecDecParams& params, std::uint64_t n_rounds,
                          std::uint64_t seed);

/// One CSV row per gamma: gamma,alpha,c,s_agg,thm1,thm2,expected_tokens.
std::string sweep_csv(double alpha, double c, const SparsityCurve& s_agg,
                      std::size_t gamma_max);

}  // namespace relusparse
