#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace relusparse {

/// Fixed-range histogram for preactivation values. Out-of-range samples go
/// to underflow/overflow so the total count is always conserved.
class PreactHistogram {
public:
    PreactHistogram(double lo = -10.0, double hi = 10.0, std::size_t n_bins = 400);

    void add(double x);
    void add(std::span<const double> xs);
    void merge(const PreactHistogram& other);

    /// Smallest bin upper edge with cumulative mass >= q. Underflow counts
    /// as mass at lo, overflow as mass beyond hi.
    double quantile(double q) const;

    double lo() const { return lo_; }
    double hi() const { return hi_; }
    std::size_t n_bins() const { return counts_.size(); }
    double bin_width() const { return (hi_ - lo_) / static_cast<double>(counts_.size()); }
    double bin_lo(std::size_t b) const { return lo_ + bin_width() * static_cast<double>(b); }
    double bin_hi(std::size_t b) const { return lo_ + bin_width() * static_cast<double>(b + 1); }
    std::uint64_t count(std::size_t b) const { return counts_[b]; }
    std::uint64_t underflow() const { return underflow_; }
    std::uint64_t overflow() const { return overflow_; }
    std::uint64_t total() const { return total_; }

    /// Total-variation distance between the two normalized distributions
    /// (including underflow/overflow mass). Both histograms must share a
    /// binning and be non-empty.
    static double tv_distance(const PreactHistogram& a, const PreactHistogram& b);

    /// CSV rows `bin_lo,bin_hi,count` with underflow/overflow as sentinel rows.
    std::string to_csv() const;

private:
    double lo_, hi_;
    std::vector<std::uint64_t> counts_;
    std::uint64_t underflow_ = 0, overflow_ = 0, total_ = 0;
};

}  // namespace relusparse
