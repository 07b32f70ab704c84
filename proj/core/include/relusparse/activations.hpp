#pragma once

#include <span>
#include <string>
#include <vector>

#include "relusparse/histogram.hpp"

namespace relusparse {

enum class ActivationKind {
    GatedSigmoid,  // f(x) = x * sigmoid(beta * x)
    Relu,
    ShiftedRelu,   // f(x) = max(0, x - b)
    ExactGelu,     // x * Phi(x), erf form
    ExactSilu,     // identical to GatedSigmoid with beta = 1
};

struct ActivationSpec {
    ActivationKind kind = ActivationKind::Relu;
    double beta = 1.0;   // GatedSigmoid only
    double shift = 0.0;  // ShiftedRelu only

    static ActivationSpec gated(double beta);
    static ActivationSpec relu() { return {ActivationKind::Relu}; }
    static ActivationSpec shifted_relu(double b) { return {ActivationKind::ShiftedRelu, 1.0, b}; }
    static ActivationSpec gelu() { return {ActivationKind::ExactGelu}; }
    static ActivationSpec silu() { return {ActivationKind::ExactSilu}; }

    bool operator==(const ActivationSpec&) const = default;

    /// Tagged-record form used in configs, e.g. {"kind":"gated","beta":1.7}.
    std::string to_json() const;
    static ActivationSpec from_json(const std::string& text);
};

double apply_scalar(const ActivationSpec& spec, double x);
double derivative_scalar(const ActivationSpec& spec, double x);

std::vector<double> apply(const ActivationSpec& spec, std::span<const double> v);
std::vector<double> derivative(const ActivationSpec& spec, std::span<const double> v);

/// Fraction of entries with |v[i]| <= tau.
double sparsity(std::span<const double> v, double tau = 0.0);

/// Shift b for ReLU(x - b) at the target quantile of the preactivation
/// distribution: smallest bin upper edge whose cumulative mass >= target.
double choose_shift(const PreactHistogram& hist, double target_sparsity);

}  // namespace relusparse
