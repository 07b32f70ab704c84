#include "relusparse/reuse.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "relusparse/instrument.hpp"
#include "relusparse/linalg.hpp"

namespace relusparse {

std::string to_string(ReuseKind kind) {
    switch (kind) {
        case ReuseKind::None: return "none";
        case ReuseKind::Aggregated: return "aggregated";
        case ReuseKind::Random: return "random";
    }
    return "?";
}

void ReusePolicy::validate() const {
    if (gamma < 1) throw std::invalid_argument("ReusePolicy: gamma must be >= 1");
    if (warmup < 1) throw std::invalid_argument("ReusePolicy: warmup must be >= 1");
    if (horizon < 1) throw std::invalid_argument("ReusePolicy: horizon must be >= 1");
}

std::uint64_t ReuseRunResult::total_row_loads() const {
    return std::accumulate(row_loads.begin(), row_loads.end(), std::uint64_t{0});
}

namespace {

// Token index -> is this a reuse block? Blocks start after warmup and
// alternate conventional, reuse, conventional, ...
bool in_reuse_block(std::size_t pos, const ReusePolicy& p) {
    if (pos < p.warmup) return false;
    return ((pos - p.warmup) / p.gamma) % 2 == 1;
}

}  // namespace

ReuseRunResult run_reuse_policy(const Model& model, std::span<const int> window,
                                ReuseKind kind, const ReusePolicy& policy) {
    policy.validate();
    const auto& cfg = model.config;
    const auto ffn_kind = cfg.ffn_activation.kind;
    if (ffn_kind != ActivationKind::Relu && ffn_kind != ActivationKind::ShiftedRelu)
        throw std::invalid_argument(
            "run_reuse_policy: FFN activation must be (shifted) ReLU");
    if (window.size() < policy.warmup + policy.horizon + 1)
        throw std::invalid_argument("run_reuse_policy: window shorter than warmup + horizon");

    const std::size_t n_layers = cfg.n_layers;
    const std::size_t d_ffn = cfg.d_ffn;

    ReuseRunResult res;
    res.row_loads.assign(n_layers, 0);
    res.active_sizes.assign(n_layers, {});

    ActiveSet resident(n_layers, d_ffn);
    std::vector<std::vector<bool>> block_mask(n_layers);
    std::vector<std::size_t> last_block(n_layers, static_cast<std::size_t>(-1));
    std::mt19937_64 rng(policy.seed);

    ForwardOptions opt;
    opt.tau = policy.tau;
    opt.down_filter = [&](std::size_t layer, std::size_t pos, std::vector<double>& v) {
        if (kind != ReuseKind::None && in_reuse_block(pos, policy)) {
            const std::size_t block = (pos - policy.warmup) / policy.gamma;
            if (last_block[layer] != block) {
                last_block[layer] = block;
                if (kind == ReuseKind::Random) {
                    // matched budget: |random set| = |resident set| exactly
                    std::vector<std::size_t> idx(d_ffn);
                    std::iota(idx.begin(), idx.end(), 0);
                    const std::size_t budget = resident.size(layer);
                    for (std::size_t i = 0; i < budget; ++i) {
                        std::uniform_int_distribution<std::size_t> pick(i, d_ffn - 1);
                        std::swap(idx[i], idx[pick(rng)]);
                    }
                    block_mask[layer].assign(d_ffn, false);
                    for (std::size_t i = 0; i < budget; ++i) block_mask[layer][idx[i]] = true;
                }
            }
            for (std::size_t i = 0; i < d_ffn; ++i) {
                const bool keep = kind == ReuseKind::Aggregated
                                      ? resident.contains(layer, i)
                                      : block_mask[layer][i];
                if (!keep) v[i] = 0.0;
            }
        } else {
            std::vector<std::size_t> fresh;
            for (std::size_t i = 0; i < d_ffn; ++i)
                if (std::abs(v[i]) > policy.tau && !resident.contains(layer, i))
                    fresh.push_back(i);
            res.row_loads[layer] += resident.insert(layer, fresh);
        }
        res.active_sizes[layer].push_back(resident.size(layer));
    };

    const std::size_t seq = policy.warmup + policy.horizon;
    const auto logits = forward(model, window.subspan(0, seq), opt);

    double nll = 0.0;
    for (std::size_t pos = policy.warmup; pos < seq; ++pos) {
        const auto probs = softmax(logits[pos]);
        nll -= std::log(
            std::max(probs[static_cast<std::size_t>(window[pos + 1])], 1e-300));
    }
    res.nll = nll / static_cast<double>(policy.horizon);
    return res;
}

ReuseReport generate_with_reuse(const Model& model,
                                const std::vector<std::vector<int>>& windows,
                                const ReusePolicy& policy) {
    if (windows.empty()) throw std::invalid_argument("generate_with_reuse: no windows");
    ReuseReport rep;
    for (const auto& w : windows) {
        const auto none = run_reuse_policy(model, w, ReuseKind::None, policy);
        const auto agg = run_reuse_policy(model, w, ReuseKind::Aggregated, policy);
        const auto rnd = run_reuse_policy(model, w, ReuseKind::Random, policy);
        rep.nll_none += none.nll;
        rep.nll_aggregated += agg.nll;
        rep.nll_random += rnd.nll;
        rep.row_loads_none += none.total_row_loads();
        rep.row_loads_aggregated += agg.total_row_loads();
    }
    const auto n = static_cast<double>(windows.size());
    rep.nll_none /= n;
    rep.nll_aggregated /= n;
    rep.nll_random /= n;
    return rep;
}

std::string sweep_gamma_csv(const Model& model,
                            const std::vector<std::vector<int>>& windows,
                            const ReusePolicy& base,
                            const std::vector<std::size_t>& gammas,
                            const std::vector<std::uint64_t>& seeds) {
    std::ostringstream os;
    os.precision(12);
    os << "gamma,policy,seed,nll,row_loads\n";
    for (std::size_t gamma : gammas) {
        for (ReuseKind kind :
             {ReuseKind::None, ReuseKind::Aggregated, ReuseKind::Random}) {
            for (std::uint64_t seed : seeds) {
                ReusePolicy p = base;
                p.gamma = gamma;
                p.seed = seed;
                double nll = 0.0;
                std::uint64_t loads = 0;
                for (const auto& w : windows) {
                    const auto r = run_reuse_policy(model, w, kind, p);
                    nll += r.nll;
                    loads += r.total_row_loads();
                }
                nll /= static_cast<double>(windows.size());
                os << gamma << "," << to_string(kind) << "," << seed << "," << nll << ","
                   << loads << "\n";
            }
        }
    }
    return os.str();
}

}  // namespace relusparse
