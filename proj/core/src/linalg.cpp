#include "relusparse/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace relusparse {

std::uint64_t MacCounter::macs(const std::string& site) const {
    auto it = macs_.find(site);
    return it == macs_.end() ? 0 : it->second;
}

std::uint64_t MacCounter::row_loads(const std::string& site) const {
    auto it = row_loads_.find(site);
    return it == row_loads_.end() ? 0 : it->second;
}

std::uint64_t MacCounter::total_macs() const {
    std::uint64_t t = 0;
    for (const auto& [_, n] : macs_) t += n;
    return t;
}

std::uint64_t MacCounter::total_row_loads() const {
    std::uint64_t t = 0;
    for (const auto& [_, n] : row_loads_) t += n;
    return t;
}

void MacCounter::merge(const MacCounter& other) {
    for (const auto& [site, n] : other.macs_) macs_[site] += n;
    for (const auto& [site, n] : other.row_loads_) row_loads_[site] += n;
}

std::vector<double> matvec_dense(const DenseMatrix& w, std::span<const double> x,
                                 MacCounter* counter, const std::string& site) {
    if (x.size() != w.rows)
        throw std::invalid_argument("matvec_dense: input dim " + std::to_string(x.size()) +
                                    " != matrix rows " + std::to_string(w.rows));
    std::vector<double> y(w.cols, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        const double* wr = w.row(i);
        for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
    }
    if (counter) counter->add_macs(site, static_cast<std::uint64_t>(w.rows) * w.cols);
    return y;
}

std::vector<double> matvec_sparse(const DenseMatrix& w, const SparseVec& x,
                                  MacCounter* counter, const std::string& site) {
    if (x.dim != w.rows)
        throw std::invalid_argument("matvec_sparse: input dim " + std::to_string(x.dim) +
                                    " != matrix rows " + std::to_string(w.rows));
    std::vector<double> y(w.cols, 0.0);
    for (std::size_t i : x.active) {
        if (i >= x.dim)
            throw std::invalid_argument("matvec_sparse: active index out of range");
        const double xi = x.values[i];
        const double* wr = w.row(i);
        for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
    }
    if (counter) {
        counter->add_macs(site, static_cast<std::uint64_t>(x.active.size()) * w.cols);
        counter->add_row_loads(site, x.active.size());
    }
    return y;
}

SparseVec sparsify(std::span<const double> v, double tau) {
    if (tau < 0.0) throw std::invalid_argument("sparsify: tau must be non-negative");
    SparseVec s;
    s.dim = v.size();
    s.values.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::abs(v[i]) > tau) {
            s.values[i] = v[i];
            s.active.push_back(i);
        }
    }
    return s;
}

std::vector<double> densify(const SparseVec& v) {
    return v.values;
}

std::vector<double> softmax(std::span<const double> v) {
    std::vector<double> y(v.size());
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        y[i] = std::exp(v[i] - m);
        z += y[i];
    }
    for (double& x : y) x /= z;
    return y;
}

std::vector<double> hadamard(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("hadamard: size mismatch");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
    return y;
}

}  // namespace relusparse
