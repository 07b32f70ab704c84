#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace relusparse {

/// Dense weight matrix stored row-major with the row index being the
/// *input* dimension. A zero input entry then skips one contiguous row,
/// which is what makes the sparse matvec save both compute and row loads.
struct DenseMatrix {
    std::size_t rows = 0;  // input dimension
    std::size_t cols = 0;  // output dimension
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c)
        : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }
    std::size_t size() const { return data.size(); }
};

/// Vector with an explicit ordered set of indices considered nonzero.
/// Entries outside `active` are exactly zero.
struct SparseVec {
    std::size_t dim = 0;
    std::vector<double> values;
    std::vector<std::size_t> active;
};

/// Per-site multiply-accumulate and row-load tallies. Site labels are
/// free-form strings like "layer3/down". Mergeable additively.
class MacCounter {
public:
    void add_macs(const std::string& site, std::uint64_t n) { macs_[site] += n; }
    void add_row_loads(const std::string& site, std::uint64_t n) { row_loads_[site] += n; }

    std::uint64_t macs(const std::string& site) const;
    std::uint64_t row_loads(const std::string& site) const;
    std::uint64_t total_macs() const;
    std::uint64_t total_row_loads() const;

    const std::map<std::string, std::uint64_t>& macs_by_site() const { return macs_; }
    const std::map<std::string, std::uint64_t>& row_loads_by_site() const { return row_loads_; }

    void merge(const MacCounter& other);
    void reset() { macs_.clear(); row_loads_.clear(); }

private:
    std::map<std::string, std::uint64_t> macs_;
    std::map<std::string, std::uint64_t> row_loads_;
};

/// y[j] = sum_i x[i] * W[i,j]. Counts rows*cols MACs against `site`.
std::vector<double> matvec_dense(const DenseMatrix& w, std::span<const double> x,
                                 MacCounter* counter = nullptr,
                                 const std::string& site = {});

/// Same value as the dense matvec on the densified input, but only rows
/// listed in x.active are touched. Counts |active|*cols MACs and |active|
/// row loads.
std::vector<double> matvec_sparse(const DenseMatrix& w, const SparseVec& x,
                                  MacCounter* counter = nullptr,
                                  const std::string& site = {});

/// Threshold at |v[i]| > tau; inactive entries are forced to exactly zero.
SparseVec sparsify(std::span<const double> v, double tau = 0.0);

std::vector<double> densify(const SparseVec& v);

/// Numerically stable softmax (max-shifted).
std::vector<double> softmax(std::span<const double> v);

std::vector<double> hadamard(std::span<const double> a, std::span<const double> b);

}  // namespace relusparse
