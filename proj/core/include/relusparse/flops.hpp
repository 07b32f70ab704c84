#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace relusparse {

enum class FfnKind { Plain, Gated };

/// Architecture shape for analytic per-token MAC accounting. One MAC = one
/// FLOP; the LM head is included by default and embedding lookups are free.
struct ArchSpec {
    std::string name;
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t d_ffn = 0;
    std::size_t vocab_size = 0;
    FfnKind ffn_kind = FfnKind::Plain;
    bool include_head = true;

    void validate() const;
};

/// Per-model scalar input sparsities for the three skippable site groups.
struct SparsityProfile {
    double qkv_in = 0.0;
    double up_in = 0.0;
    double down_in = 0.0;

    void validate() const;
};

struct FlopsReport {
    // site -> per-token MAC count over the whole network
    std::map<std::string, double> dense;
    std::map<std::string, double> effective;
    double dense_total = 0.0;
    double effective_total = 0.0;

    double dense_share(const std::string& site) const;
    std::string to_csv() const;   // site,dense_macs,effective_macs,share
    std::string to_json() const;
};

/// Dense per-token MACs: per layer QKV = 3 d^2, O = d^2, plain FFN
/// up = down = d*d_ffn, gated FFN gate = up = down = d*d_ffn; plus the head.
FlopsReport dense_macs(const ArchSpec& arch);

/// Sparsity-discounted MACs. QKV scales by (1 - qkv_in), O and head never
/// scale. Plain FFN: up by (1 - up_in), down by (1 - down_in). Gated FFN:
/// gate by (1 - up_in); up and down each by (1 - max(up_in, down_in)),
/// since a zero gate output skips both the up column and the down row.
FlopsReport effective_macs(const ArchSpec& arch, const SparsityProfile& profile);

struct ComputeShares {
    double qkv_plus_up = 0.0;  // QKV + up/gate inputs, the stage-2 targets
    double down = 0.0;
    double attn_out = 0.0;
    double head = 0.0;
};

ComputeShares compute_shares(const ArchSpec& arch);

struct FlopsMatchResult {
    double scale_factor = 0.0;     // width multiplier applied to arch_b
    double target_effective = 0.0; // effective MACs of (arch_a, profile_a)
    double matched_dense = 0.0;    // dense MACs of arch_b at scale_factor
    double mac_gap = 0.0;          // matched_dense - target_effective
};

/// Width scale on arch_b (d_model and d_ffn) whose dense MACs equal the
/// effective MACs of (arch_a, profile_a); solved by monotone bisection.
FlopsMatchResult flops_matched_compare(const ArchSpec& arch_a, const SparsityProfile& profile_a,
                                       const ArchSpec& arch_b);

/// Named architecture presets (opt-1.3b, opt-2.7b, opt-6.7b, llama-7b).
/// Dimensions are external constants taken from the models' public cards.
const std::vector<ArchSpec>& arch_presets();
std::optional<ArchSpec> find_arch_preset(const std::string& name);

}  // namespace relusparse
