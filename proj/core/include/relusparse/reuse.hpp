#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "relusparse/model.hpp"

namespace relusparse {

enum class ReuseKind { None, Aggregated, Random };

std::string to_string(ReuseKind kind);

/// Alternating-phase weight reuse at the down projection: after `warmup`
/// conventional tokens, blocks of `gamma` tokens alternate between
/// conventional generation (active set grows, rows load) and reuse (the
/// down-projection input is masked to already-loaded neurons, no new rows).
struct ReusePolicy {
    std::size_t warmup = 128;
    std::size_t gamma = 16;
    std::size_t horizon = 128;  // evaluated tokens after warmup
    double tau = 0.0;
    std::uint64_t seed = 0;  // Random policy only

    void validate() const;
};

struct ReuseRunResult {
    double nll = 0.0;  // teacher-forced mean NLL over the horizon
    std::vector<std::uint64_t> row_loads;           // per layer
    std::vector<std::vector<std::size_t>> active_sizes;  // [layer][token]
    std::uint64_t total_row_loads() const;
};

/// One teacher-forced pass over a window of warmup + horizon + 1 tokens.
ReuseRunResult run_reuse_policy(const Model& model, std::span<const int> window,
                                ReuseKind kind, const ReusePolicy& policy);

struct ReuseReport {
    double nll_none = 0.0;
    double nll_aggregated = 0.0;
    double nll_random = 0.0;
    std::uint64_t row_loads_none = 0;
    std::uint64_t row_loads_aggregated = 0;
};

/// Runs all three policies over the given windows and averages.
ReuseReport generate_with_reuse(const Model& model,
                                const std::vector<std::vector<int>>& windows,
                                const ReusePolicy& policy);

/// CSV `gamma,policy,seed,nll,row_loads`, one row per
/// (gamma, policy, seed) cell averaged over the windows.
std::string sweep_gamma_csv(const Model& model,
                            const std::vector<std::vector<int>>& windows,
                            const ReusePolicy& base,
                            const std::vector<std::size_t>& gammas,
                            const std::vector<std::uint64_t>& seeds);

}  // namespace relusparse
