#include "relusparse/flops.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace relusparse {

void ArchSpec::validate() const {
    if (n_layers == 0 || d_model == 0 || d_ffn == 0 || vocab_size == 0)
        throw std::invalid_argument("ArchSpec: all dimensions must be positive");
}

void SparsityProfile::validate() const {
    for (double s : {qkv_in, up_in, down_in})
        if (!(s >= 0.0 && s <= 1.0))
            throw std::invalid_argument("SparsityProfile: fractions must be in [0,1]");
}

double FlopsReport::dense_share(const std::string& site) const {
    auto it = dense.find(site);
    if (it == dense.end()) return 0.0;
    return it->second / dense_total;
}

std::string FlopsReport::to_csv() const {
    std::ostringstream os;
    os << "site,dense_macs,effective_macs,share\n";
    os.precision(17);
    for (const auto& [site, d] : dense) {
        os << site << "," << d << "," << effective.at(site) << "," << d / dense_total << "\n";
    }
    os << "total," << dense_total << "," << effective_total << ",1\n";
    return os.str();
}

std::string FlopsReport::to_json() const {
    nlohmann::json j;
    for (const auto& [site, d] : dense) {
        j["sites"][site] = {{"dense_macs", d},
                            {"effective_macs", effective.at(site)},
                            {"share", d / dense_total}};
    }
    j["dense_total"] = dense_total;
    j["effective_total"] = effective_total;
    return j.dump(2);
}

namespace {

struct SiteMacs {
    double qkv, attn_out, gate, up, down, head;
};

SiteMacs dense_sites(const ArchSpec& a) {
    const double L = static_cast<double>(a.n_layers);
    const double d = static_cast<double>(a.d_model);
    const double f = static_cast<double>(a.d_ffn);
    SiteMacs s{};
    s.qkv = L * 3.0 * d * d;
    s.attn_out = L * d * d;
    s.gate = a.ffn_kind == FfnKind::Gated ? L * d * f : 0.0;
    s.up = L * d * f;
    s.down = L * f * d;
    s.head = a.include_head ? static_cast<double>(a.vocab_size) * d : 0.0;
    return s;
}

FlopsReport make_report(const ArchSpec& a, const SiteMacs& dense, const SiteMacs& eff) {
    FlopsReport r;
    r.dense["qkv"] = dense.qkv;
    r.dense["attn_out"] = dense.attn_out;
    if (a.ffn_kind == FfnKind::Gated) r.dense["gate"] = dense.gate;
    r.dense["up"] = dense.up;
    r.dense["down"] = dense.down;
    if (a.include_head) r.dense["head"] = dense.head;

    r.effective["qkv"] = eff.qkv;
    r.effective["attn_out"] = eff.attn_out;
    if (a.ffn_kind == FfnKind::Gated) r.effective["gate"] = eff.gate;
    r.effective["up"] = eff.up;
    r.effective["down"] = eff.down;
    if (a.include_head) r.effective["head"] = eff.head;

    for (const auto& [_, v] : r.dense) r.dense_total += v;
    for (const auto& [_, v] : r.effective) r.effective_total += v;
    return r;
}

}  // namespace

FlopsReport dense_macs(const ArchSpec& arch) {
    arch.validate();
    const SiteMacs s = dense_sites(arch);
    return make_report(arch, s, s);
}

FlopsReport effective_macs(const ArchSpec& arch, const SparsityProfile& profile) {
    arch.validate();
    profile.validate();
    const SiteMacs d = dense_sites(arch);
    SiteMacs e = d;
    e.qkv = d.qkv * (1.0 - profile.qkv_in);
    if (arch.ffn_kind == FfnKind::Gated) {
        const double neuron_skip = 1.0 - std::max(profile.up_in, profile.down_in);
        e.gate = d.gate * (1.0 - profile.up_in);
        e.up = d.up * neuron_skip;
        e.down = d.down * neuron_skip;
    } else {
        e.up = d.up * (1.0 - profile.up_in);
        e.down = d.down * (1.0 - profile.down_in);
    }
    return make_report(arch, d, e);
}

ComputeShares compute_shares(const ArchSpec& arch) {
    const FlopsReport r = dense_macs(arch);
    ComputeShares s;
    s.qkv_plus_up = (r.dense.at("qkv") + r.dense.at("up") +
                     (arch.ffn_kind == FfnKind::Gated ? r.dense.at("gate") : 0.0)) /
                    r.dense_total;
    s.down = r.dense.at("down") / r.dense_total;
    s.attn_out = r.dense.at("attn_out") / r.dense_total;
    s.head = arch.include_head ? r.dense.at("head") / r.dense_total : 0.0;
    return s;
}

FlopsMatchResult flops_matched_compare(const ArchSpec& arch_a, const SparsityProfile& profile_a,
                                       const ArchSpec& arch_b) {
    arch_b.validate();
    const double target = effective_macs(arch_a, profile_a).effective_total;

    // Dense MACs of arch_b with widths scaled continuously by f.
    auto scaled_dense = [&](double f) {
        const double L = static_cast<double>(arch_b.n_layers);
        const double d = static_cast<double>(arch_b.d_model) * f;
        const double ff = static_cast<double>(arch_b.d_ffn) * f;
        double t = L * (4.0 * d * d + (arch_b.ffn_kind == FfnKind::Gated ? 3.0 : 2.0) * d * ff);
        if (arch_b.include_head) t += static_cast<double>(arch_b.vocab_size) * d;
        return t;
    };

    double lo = 1e-6, hi = 1.0;
    while (scaled_dense(hi) < target) hi *= 2.0;
    while (hi - lo > 1e-6 * hi) {
        const double mid = 0.5 * (lo + hi);
        (scaled_dense(mid) < target ? lo : hi) = mid;
    }
    FlopsMatchResult res;
    res.scale_factor = 0.5 * (lo + hi);
    res.target_effective = target;
    res.matched_dense = scaled_dense(res.scale_factor);
    res.mac_gap = res.matched_dense - target;
    return res;
}

const std::vector<ArchSpec>& arch_presets() {
    static const std::vector<ArchSpec> presets = {
        {"opt-1.3b", 24, 2048, 8192, 50272, FfnKind::Plain, true},
        {"opt-2.7b", 32, 2560, 10240, 50272, FfnKind::Plain, true},
        {"opt-6.7b", 32, 4096, 16384, 50272, FfnKind::Plain, true},
        {"llama-7b", 32, 4096, 11008, 32000, FfnKind::Gated, true},
    };
    return presets;
}

std::optional<ArchSpec> find_arch_preset(const std::string& name) {
    for (const auto& a : arch_presets())
        if (a.name == name) return a;
    return std::nullopt;
}

}  // namespace relusparse
