#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "relusparse/histogram.hpp"
#include "relusparse/model.hpp"

namespace relusparse {

struct AdamWParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    std::size_t seq_len = 64;
    AdamWParams adamw;
    std::uint64_t seed = 0;
    std::size_t eval_interval = 100;
    std::size_t eval_batches = 4;
    std::vector<std::size_t> histogram_snapshot_steps;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

/// Byte-level corpus with a non-overlapping train/validation split.
struct Corpus {
    std::vector<std::uint8_t> bytes;
    std::size_t train_begin = 0, train_end = 0;
    std::size_t valid_begin = 0, valid_end = 0;

    static Corpus from_file(const std::string& path, double valid_fraction = 0.1);
    static Corpus from_bytes(std::vector<std::uint8_t> bytes, double valid_fraction = 0.1);

    std::size_t train_size() const { return train_end - train_begin; }
    std::size_t valid_size() const { return valid_end - valid_begin; }
    /// Window of seq_len + 1 tokens starting at `offset` within the split.
    std::vector<int> window(bool from_valid, std::size_t offset, std::size_t seq_len) const;
};

/// One training batch: each sequence holds seq_len inputs plus the next
/// token, so sequences have length seq_len + 1.
struct Batch {
    std::vector<std::vector<int>> sequences;
};

Batch sample_batch(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len,
                   std::mt19937_64& rng);
/// Deterministic evenly spaced validation batches.
std::vector<Batch> validation_batches(const Corpus& corpus, std::size_t n_batches,
                                      std::size_t batch_size, std::size_t seq_len);

/// Mean next-token negative log-likelihood over all positions of the batch.
double loss(const Model& model, const Batch& batch);

/// Exact reverse-mode gradients of `loss`; the returned Model holds the
/// gradient for each parameter tensor. Optionally reports the loss value.
Model backward(const Model& model, const Batch& batch, double* loss_out = nullptr);

class AdamW {
public:
    AdamW(Model& model, const AdamWParams& params);
    void step(Model& grads);

private:
    Model* model_;
    AdamWParams params_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> decay_;
};

struct TrainResult {
    Model model;
    std::vector<std::pair<std::size_t, double>> train_curve;  // (step, batch loss)
    std::vector<std::pair<std::size_t, double>> valid_curve;  // (step, validation loss)
    std::vector<std::pair<std::size_t, PreactHistogram>> snapshots;
    double initial_valid_loss = 0.0;
    double final_valid_loss = 0.0;
};

/// Deterministic per seed. Throws with the offending step on divergence.
TrainResult train_model(Model model, const Corpus& corpus, const TrainConfig& config);

double validation_loss(const Model& model, const Corpus& corpus, std::size_t n_batches,
                       std::size_t batch_size, std::size_t seq_len);

/// Merged FFN preactivation histogram over the validation batches.
PreactHistogram validation_preact_histogram(const Model& model, const Corpus& corpus,
                                            std::size_t n_batches, std::size_t batch_size,
                                            std::size_t seq_len);

/// Mean down-projection-input sparsity over the validation batches.
double validation_ffn_sparsity(const Model& model, const Corpus& corpus, double tau,
                               std::size_t n_batches, std::size_t batch_size,
                               std::size_t seq_len);

struct BetaSweepRow {
    std::string label;
    ActivationSpec spec;
    double final_valid_loss = 0.0;
    double final_ffn_sparsity = 0.0;  // tau = 1e-2 for smooth members, 0 for ReLU
};

std::vector<BetaSweepRow> beta_sweep(const Corpus& corpus, const ModelConfig& base,
                                     const TrainConfig& config,
                                     const std::vector<ActivationSpec>& specs);

struct RecoveryResult {
    double pre_surgery_loss = 0.0;
    double post_surgery_loss = 0.0;   // before any finetuning
    double post_finetune_loss = 0.0;
    double histogram_tv = 0.0;        // across the finetune
    Model final_model;
};

/// Pretrain with the base (smooth) activation, apply stage-1 surgery, then
/// finetune with a budget of 10% of the pretrain steps.
RecoveryResult recovery_experiment(const Corpus& corpus, const ModelConfig& base,
                                   const TrainConfig& pretrain_config);

}  // namespace relusparse
