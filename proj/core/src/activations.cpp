#include "relusparse/activations.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace relusparse {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double gated(double x, double beta) { return x * sigmoid(beta * x); }

double gated_deriv(double x, double beta) {
    const double s = sigmoid(beta * x);
    return s * (1.0 + beta * x * (1.0 - s));
}

constexpr double kInvSqrt2 = 0.7071067811865475244;

double gelu_exact(double x) { return x * 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_deriv(double x) {
    const double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return phi + x * pdf;
}

}  // namespace

ActivationSpec ActivationSpec::gated(double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("ActivationSpec: beta must be positive");
    return {ActivationKind::GatedSigmoid, beta};
}

std::string ActivationSpec::to_json() const {
    nlohmann::json j;
    switch (kind) {
        case ActivationKind::GatedSigmoid: j = {{"kind", "gated"}, {"beta", beta}}; break;
        case ActivationKind::Relu: j = {{"kind", "relu"}}; break;
        case ActivationKind::ShiftedRelu: j = {{"kind", "shifted_relu"}, {"b", shift}}; break;
        case ActivationKind::ExactGelu: j = {{"kind", "gelu"}}; break;
        case ActivationKind::ExactSilu: j = {{"kind", "silu"}}; break;
    }
    return j.dump();
}

ActivationSpec ActivationSpec::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "gated") return gated(j.at("beta").get<double>());
    if (kind == "relu") return relu();
    if (kind == "shifted_relu") return shifted_relu(j.at("b").get<double>());
    if (kind == "gelu") return gelu();
    if (kind == "silu") return silu();
    throw std::invalid_argument("ActivationSpec: unknown kind '" + kind + "'");
}

double apply_scalar(const ActivationSpec& spec, double x) {
    switch (spec.kind) {
        case ActivationKind::GatedSigmoid: return gated(x, spec.beta);
        case ActivationKind::Relu: return x > 0.0 ? x : 0.0;
        case ActivationKind::ShiftedRelu: {
            const double s = x - spec.shift;
            return s > 0.0 ? s : 0.0;
        }
        case ActivationKind::ExactGelu: return gelu_exact(x);
        case ActivationKind::ExactSilu: return gated(x, 1.0);
    }
    return 0.0;
}

double derivative_scalar(const ActivationSpec& spec, double x) {
    switch (spec.kind) {
        case ActivationKind::GatedSigmoid: return gated_deriv(x, spec.beta);
        case ActivationKind::Relu: return x > 0.0 ? 1.0 : 0.0;  // kink derivative = 0
        case ActivationKind::ShiftedRelu: return x > spec.shift ? 1.0 : 0.0;
        case ActivationKind::ExactGelu: return gelu_deriv(x);
        case ActivationKind::ExactSilu: return gated_deriv(x, 1.0);
    }
    return 0.0;
}

std::vector<double> apply(const ActivationSpec& spec, std::span<const double> v) {
    std::vector<double> y(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) y[i] = apply_scalar(spec, v[i]);
    return y;
}

std::vector<double> derivative(const ActivationSpec& spec, std::span<const double> v) {
    std::vector<double> y(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) y[i] = derivative_scalar(spec, v[i]);
    return y;
}

double sparsity(std::span<const double> v, double tau) {
    if (v.empty()) throw std::invalid_argument("sparsity: empty vector");
    if (tau < 0.0) throw std::invalid_argument("sparsity: tau must be non-negative");
    std::size_t zeros = 0;
    for (double x : v)
        if (std::abs(x) <= tau) ++zeros;
    return static_cast<double>(zeros) / static_cast<double>(v.size());
}

double choose_shift(const PreactHistogram& hist, double target_sparsity) {
    if (!(target_sparsity > 0.0 && target_sparsity < 1.0))
        throw std::invalid_argument("choose_shift: target must be in (0,1)");
    return hist.quantile(target_sparsity);
}

}  // namespace relusparse
