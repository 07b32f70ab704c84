#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "relusparse/activations.hpp"
#include "relusparse/flops.hpp"
#include "relusparse/linalg.hpp"

namespace relusparse {

enum class NormKind { LayerNorm, RmsNorm };

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ffn = 256;
    std::size_t vocab_size = 256;
    std::size_t max_seq = 128;
    FfnKind ffn_kind = FfnKind::Plain;
    NormKind norm_kind = NormKind::LayerNorm;
    ActivationSpec ffn_activation = ActivationSpec::gelu();
    std::optional<ActivationSpec> post_norm_activation;  // present only in stage-2
    bool tie_head = true;

    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    std::vector<double> norm1_scale, norm1_offset;
    DenseMatrix wq, wk, wv, wo;  // each d_model x d_model, input-major
    std::vector<double> norm2_scale, norm2_offset;
    DenseMatrix w_gate;  // d_model x d_ffn, gated FFN only (empty otherwise)
    DenseMatrix w_up;    // d_model x d_ffn
    DenseMatrix w_down;  // d_ffn x d_model
};

struct Model {
    ModelConfig config;
    DenseMatrix tok_emb;  // vocab x d_model
    DenseMatrix pos_emb;  // max_seq x d_model
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm_scale, final_norm_offset;
    DenseMatrix lm_head;  // d_model x vocab; empty when tie_head

    std::size_t n_params() const;
};

/// Named view over every parameter tensor, in the fixed checkpoint order.
struct TensorRef {
    std::string name;
    double* data;
    std::size_t size;
};
std::vector<TensorRef> tensor_refs(Model& model);

/// Deterministic init: weights ~ N(0, 1/fan_in), norm scales 1, offsets 0.
Model init_random(const ModelConfig& config, std::uint64_t seed);

enum class SurgeryStage { Stage1, Stage2 };

/// Activation surgery. Stage 1 replaces the FFN activation (the gate branch
/// for gated FFNs) with ReLU; stage 2 additionally inserts ReLU after both
/// per-layer norms. No weight tensor is modified.
Model relufy(const Model& model, SurgeryStage stage);

/// Passive observation points inside forward. Hooks never alter values.
struct ForwardHooks {
    // site is one of "qkv_in", "up_in", "down_in"; one call per (layer, position)
    std::function<void(std::size_t layer, const std::string& site,
                       std::span<const double>)> on_site_input;
    // FFN preactivation (gate-branch preactivation for gated FFNs)
    std::function<void(std::size_t layer, std::span<const double>)> on_ffn_preact;
};

/// Mutating filter applied to the down-projection input (post-activation
/// vector) before the down matvec; used by the weight-reuse scheme.
using DownInputFilter =
    std::function<void(std::size_t layer, std::size_t pos, std::vector<double>&)>;

struct ForwardOptions {
    double tau = 0.0;              // sparsification threshold at skippable sites
    MacCounter* counter = nullptr;
    const ForwardHooks* hooks = nullptr;
    DownInputFilter down_filter;
};

/// Full-sequence forward; returns logits per position (seq x vocab).
/// Projections at sparsifiable sites run through the row-skipping kernel.
std::vector<std::vector<double>> forward(const Model& model,
                                         std::span<const int> tokens,
                                         const ForwardOptions& options = {});

struct GenerationMode {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    static GenerationMode greedy_mode() { return {}; }
    static GenerationMode sampled(double t, std::uint64_t seed) { return {false, t, seed}; }
};

/// Autoregressive generation with a key-value cache. Token-identical to
/// re-running the full forward per step.
std::vector<int> generate(const Model& model, std::span<const int> prompt,
                          std::size_t n_new, const GenerationMode& mode,
                          const ForwardOptions& options = {});

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { Io, Magic, Version, Truncated, ShapeMismatch, BadConfig };
    CheckpointError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Checkpoint format: magic "RLFC", version byte 1, u32-LE config length,
/// canonical config JSON, then each tensor in tensor_refs order as a
/// u32-LE element count followed by little-endian IEEE f64 values.
void save(const Model& model, const std::string& path);
Model load(const std::string& path);

}  // namespace relusparse
