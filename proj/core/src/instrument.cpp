#include "relusparse/instrument.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace relusparse {

double SparsityReport::mean(std::size_t layer, const std::string& site) const {
    auto it = cells.find({layer, site});
    return it == cells.end() ? 0.0 : it->second.mean();
}

double SparsityReport::site_mean(const std::string& site) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [key, cell] : cells) {
        if (key.second == site) {
            sum += cell.mean();
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

void SparsityReport::merge(const SparsityReport& other) {
    for (const auto& [key, cell] : other.cells) {
        auto& mine = cells[key];
        mine.sparsity_sum += cell.sparsity_sum;
        mine.tokens += cell.tokens;
    }
}

std::string SparsityReport::to_csv() const {
    std::ostringstream os;
    os.precision(12);
    os << "layer,site,sparsity\n";
    for (const auto& [key, cell] : cells)
        os << key.first << "," << key.second << "," << cell.mean() << "\n";
    return os.str();
}

SparsityRecorder::SparsityRecorder(double tau) : tau_(tau) {
    report_.tau = tau;
    hooks_.on_site_input = [this](std::size_t layer, const std::string& site,
                                  std::span<const double> v) {
        auto& cell = report_.cells[{layer, site}];
        cell.sparsity_sum += sparsity(v, tau_);
        ++cell.tokens;
    };
}

const SparsityReport& SparsityRecorder::report() const {
    bool any = false;
    for (const auto& [_, cell] : report_.cells)
        if (cell.tokens > 0) any = true;
    if (!any) throw std::invalid_argument("SparsityRecorder: no tokens observed");
    return report_;
}

PreactRecorder::PreactRecorder(std::size_t n_layers, double lo, double hi,
                               std::size_t n_bins) {
    per_layer_.assign(n_layers, PreactHistogram(lo, hi, n_bins));
    hooks_.on_ffn_preact = [this](std::size_t layer, std::span<const double> v) {
        per_layer_[layer].add(v);
    };
}

PreactHistogram PreactRecorder::merged() const {
    PreactHistogram out = per_layer_.at(0);
    for (std::size_t l = 1; l < per_layer_.size(); ++l) out.merge(per_layer_[l]);
    return out;
}

ActiveSet::ActiveSet(std::size_t n_layers, std::size_t d_ffn)
    : d_ffn_(d_ffn), bits_(n_layers, std::vector<bool>(d_ffn, false)),
      sizes_(n_layers, 0) {}

std::size_t ActiveSet::insert(std::size_t layer, const std::vector<std::size_t>& neurons) {
    std::size_t added = 0;
    auto& b = bits_[layer];
    for (std::size_t n : neurons) {
        if (n >= d_ffn_) throw std::invalid_argument("ActiveSet: neuron index out of range");
        if (!b[n]) {
            b[n] = true;
            ++added;
        }
    }
    sizes_[layer] += added;
    return added;
}

bool ActiveSet::contains(std::size_t layer, std::size_t neuron) const {
    return bits_[layer][neuron];
}

std::string AggregatedTrace::to_csv() const {
    std::ostringstream os;
    os.precision(12);
    os << "t,layer,unused_fraction\n";
    for (std::size_t t = 0; t < t_max(); ++t)
        for (std::size_t l = 0; l < per_layer.size(); ++l)
            os << (t + 1) << "," << l << "," << per_layer[l][t] << "\n";
    return os.str();
}

void update_trace(AggregatedTrace& trace, ActiveSet& active,
                  const std::vector<std::vector<std::size_t>>& active_masks) {
    if (trace.per_layer.empty()) trace.per_layer.resize(active.n_layers());
    for (std::size_t l = 0; l < active.n_layers(); ++l) {
        active.insert(l, active_masks.at(l));
        trace.per_layer[l].push_back(
            1.0 - static_cast<double>(active.size(l)) / static_cast<double>(active.d_ffn()));
    }
}

AggregatedTrace record_aggregated_trace(const Model& model, std::span<const int> tokens,
                                        double tau) {
    const std::size_t n_layers = model.config.n_layers;
    const std::size_t d_ffn = model.config.d_ffn;

    // collect per-token active masks at the down-projection input
    std::vector<std::vector<std::vector<std::size_t>>> masks(
        tokens.size(), std::vector<std::vector<std::size_t>>(n_layers));
    ForwardHooks hooks;
    std::vector<std::size_t> pos_per_layer(n_layers, 0);
    hooks.on_site_input = [&](std::size_t layer, const std::string& site,
                              std::span<const double> v) {
        if (site != "down_in") return;
        const std::size_t t = pos_per_layer[layer]++;
        for (std::size_t i = 0; i < v.size(); ++i)
            if (std::abs(v[i]) > tau) masks[t][layer].push_back(i);
    };
    ForwardOptions opt;
    opt.hooks = &hooks;
    forward(model, tokens, opt);

    AggregatedTrace trace;
    trace.d_ffn = d_ffn;
    ActiveSet active(n_layers, d_ffn);
    for (std::size_t t = 0; t < tokens.size(); ++t) update_trace(trace, active, masks[t]);
    return trace;
}

double random_baseline(double s, std::size_t t) {
    if (!(s >= 0.0 && s <= 1.0))
        throw std::invalid_argument("random_baseline: s must be in [0,1]");
    return std::pow(s, static_cast<double>(t));
}

}  // namespace relusparse
