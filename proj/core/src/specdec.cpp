#include "relusparse/specdec.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace relusparse {

namespace {

void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0))
        throw std::invalid_argument("alpha must be in [0,1)");
}

void check_common(double c, std::size_t gamma, double s) {
    if (!(c > 0.0)) throw std::invalid_argument("c must be positive");
    if (gamma < 1) throw std::invalid_argument("gamma must be >= 1");
    if (!(s >= 0.0 && s < 1.0)) throw std::invalid_argument("s must be in [0,1)");
}

}  // namespace

double thm1_speedup(double c, std::size_t gamma, double s) {
    check_common(c, gamma, s);
    const double cg = c * static_cast<double>(gamma);
    return (cg + 1.0) / (cg + (1.0 - s));
}

double expected_tokens(double alpha, std::size_t gamma) {
    check_alpha(alpha);
    if (gamma < 1) throw std::invalid_argument("gamma must be >= 1");
    return (1.0 - std::pow(alpha, static_cast<double>(gamma) + 1.0)) / (1.0 - alpha);
}

double thm2_speedup(double alpha, double c, std::size_t gamma, double s) {
    check_alpha(alpha);
    check_common(c, gamma, s);
    const double cg = c * static_cast<double>(gamma);
    return (1.0 - std::pow(alpha, static_cast<double>(gamma) + 1.0)) /
           ((cg + (1.0 - s)) * (1.0 - alpha));
}

std::size_t optimal_gamma(double alpha, double c, const SparsityCurve& s_agg,
                          std::size_t gamma_max) {
    if (gamma_max < 1) throw std::invalid_argument("gamma_max must be >= 1");
    std::size_t best = 1;
    double best_v = -1.0;
    for (std::size_t g = 1; g <= gamma_max; ++g) {
        const double v = thm2_speedup(alpha, c, g, s_agg ? s_agg(g) : 0.0);
        if (v > best_v) {
            best_v = v;
            best = g;
        }
    }
    return best;
}

SimResult simulate_rounds(const SpecDecParams& params, std::uint64_t n_rounds,
                          std::uint64_t seed) {
    check_alpha(params.alpha);
    const double s = params.s_agg ? params.s_agg(params.gamma) : 0.0;
    check_common(params.c, params.gamma, s);
    if (n_rounds < 1) throw std::invalid_argument("n_rounds must be >= 1");

    std::mt19937_64 rng(seed);
    std::bernoulli_distribution accept(params.alpha);

    std::uint64_t tokens = 0;
    for (std::uint64_t r = 0; r < n_rounds; ++r) {
        std::uint64_t emitted = 1;  // verification always yields one token
        for (std::size_t g = 0; g < params.gamma; ++g) {
            if (!accept(rng)) break;
            ++emitted;
        }
        tokens += emitted;
    }

    const double T = params.unit_latency;
    const double cg = params.c * static_cast<double>(params.gamma);
    const double sparse_round = cg * T + (1.0 - s) * T;
    const double dense_round = cg * T + T;
    const double mean_tokens = static_cast<double>(tokens) / static_cast<double>(n_rounds);

    SimResult res;
    res.rounds = n_rounds;
    res.mean_tokens_per_round = mean_tokens;
    res.speedup_over_standard = dense_round / sparse_round;
    // autoregressive: T per token over the same token stream
    res.speedup_over_autoregressive = mean_tokens * T / sparse_round;
    return res;
}

std::string sweep_csv(double alpha, double c, const SparsityCurve& s_agg,
                      std::size_t gamma_max) {
    std::ostringstream os;
    os.precision(12);
    os << "gamma,alpha,c,s_agg,thm1,thm2,expected_tokens\n";
    for (std::size_t g = 1; g <= gamma_max; ++g) {
        const double s = s_agg ? s_agg(g) : 0.0;
        os << g << "," << alpha << "," << c << "," << s << "," << thm1_speedup(c, g, s)
           << "," << thm2_speedup(alpha, c, g, s) << "," << expected_tokens(alpha, g) << "\n";
    }
    return os.str();
}

}  // namespace relusparse
