#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "relusparse/histogram.hpp"
#include "relusparse/model.hpp"

namespace relusparse {

/// Mean input sparsity per (layer, site) over all observed tokens.
struct SparsityReport {
    struct Cell {
        double sparsity_sum = 0.0;
        std::uint64_t tokens = 0;
        double mean() const { return tokens == 0 ? 0.0 : sparsity_sum / tokens; }
    };
    std::map<std::pair<std::size_t, std::string>, Cell> cells;
    double tau = 0.0;

    double mean(std::size_t layer, const std::string& site) const;
    /// Mean over layers for one site.
    double site_mean(const std::string& site) const;
    void merge(const SparsityReport& other);
    std::string to_csv() const;  // layer,site,sparsity
};

/// Builds a SparsityReport from forward hooks. Attach to a ForwardOptions,
/// run forwards, then take the report.
class SparsityRecorder {
public:
    explicit SparsityRecorder(double tau = 0.0);
    const ForwardHooks& hooks() const { return hooks_; }
    const SparsityReport& report() const;

private:
    double tau_;
    SparsityReport report_;
    ForwardHooks hooks_;
};

/// Records FFN preactivation histograms per layer (and a merged view).
class PreactRecorder {
public:
    PreactRecorder(std::size_t n_layers, double lo = -10.0, double hi = 10.0,
                   std::size_t n_bins = 400);
    const ForwardHooks& hooks() const { return hooks_; }
    const PreactHistogram& layer(std::size_t l) const { return per_layer_.at(l); }
    PreactHistogram merged() const;

private:
    std::vector<PreactHistogram> per_layer_;
    ForwardHooks hooks_;
};

/// Per-layer set of FFN neurons activated so far. Grows monotonically.
class ActiveSet {
public:
    ActiveSet(std::size_t n_layers, std::size_t d_ffn);
    /// Marks neurons active; returns how many were new.
    std::size_t insert(std::size_t layer, const std::vector<std::size_t>& neurons);
    bool contains(std::size_t layer, std::size_t neuron) const;
    std::size_t size(std::size_t layer) const { return sizes_[layer]; }
    std::size_t d_ffn() const { return d_ffn_; }
    std::size_t n_layers() const { return bits_.size(); }

private:
    std::size_t d_ffn_;
    std::vector<std::vector<bool>> bits_;
    std::vector<std::size_t> sizes_;
};

/// Per-layer unused-neuron fraction over token index t. Non-increasing.
struct AggregatedTrace {
    std::size_t d_ffn = 0;
    std::vector<std::vector<double>> per_layer;  // [layer][t]

    std::size_t t_max() const { return per_layer.empty() ? 0 : per_layer[0].size(); }
    std::string to_csv() const;  // t,layer,unused_fraction
};

/// Appends one token's observation: per-layer active neuron indices for
/// token t. Trace value = 1 - |active set so far| / d_ffn.
void update_trace(AggregatedTrace& trace, ActiveSet& active,
                  const std::vector<std::vector<std::size_t>>& active_masks);

/// Runs the model teacher-forced over `tokens` and records the aggregated
/// trace, with "used" meaning post-activation magnitude > tau at the
/// down-projection input.
AggregatedTrace record_aggregated_trace(const Model& model, std::span<const int> tokens,
                                        double tau = 0.0);

/// Expected unused fraction after t tokens under uniformly random
/// activation at per-token sparsity s: exactly s^t.
double random_baseline(double s, std::size_t t);

}  // namespace relusparse
