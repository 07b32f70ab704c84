#include "relusparse/histogram.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace relusparse {

PreactHistogram::PreactHistogram(double lo, double hi, std::size_t n_bins)
    : lo_(lo), hi_(hi), counts_(n_bins, 0) {
    if (!(hi > lo) || n_bins == 0)
        throw std::invalid_argument("PreactHistogram: need hi > lo and n_bins > 0");
}

void PreactHistogram::add(double x) {
    ++total_;
    if (x < lo_) {
        ++underflow_;
    } else if (x >= hi_) {
        ++overflow_;
    } else {
        auto b = static_cast<std::size_t>((x - lo_) / bin_width());
        if (b >= counts_.size()) b = counts_.size() - 1;  // right-edge rounding
        ++counts_[b];
    }
}

void PreactHistogram::add(std::span<const double> xs) {
    for (double x : xs) add(x);
}

void PreactHistogram::merge(const PreactHistogram& other) {
    if (other.lo_ != lo_ || other.hi_ != hi_ || other.counts_.size() != counts_.size())
        throw std::invalid_argument("PreactHistogram::merge: binning mismatch");
    for (std::size_t b = 0; b < counts_.size(); ++b) counts_[b] += other.counts_[b];
    underflow_ += other.underflow_;
    overflow_ += other.overflow_;
    total_ += other.total_;
}

double PreactHistogram::quantile(double q) const {
    if (total_ == 0) throw std::invalid_argument("quantile: empty histogram");
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("quantile: q must be in (0,1)");
    const double target = q * static_cast<double>(total_);
    double cum = static_cast<double>(underflow_);
    if (cum >= target) return lo_;
    for (std::size_t b = 0; b < counts_.size(); ++b) {
        cum += static_cast<double>(counts_[b]);
        if (cum >= target) return bin_hi(b);
    }
    return hi_;
}

double PreactHistogram::tv_distance(const PreactHistogram& a, const PreactHistogram& b) {
    if (a.lo_ != b.lo_ || a.hi_ != b.hi_ || a.counts_.size() != b.counts_.size())
        throw std::invalid_argument("tv_distance: binning mismatch");
    if (a.total_ == 0 || b.total_ == 0)
        throw std::invalid_argument("tv_distance: empty histogram");
    const double na = static_cast<double>(a.total_);
    const double nb = static_cast<double>(b.total_);
    double tv = std::abs(a.underflow_ / na - b.underflow_ / nb) +
                std::abs(a.overflow_ / na - b.overflow_ / nb);
    for (std::size_t i = 0; i < a.counts_.size(); ++i)
        tv += std::abs(a.counts_[i] / na - b.counts_[i] / nb);
    return 0.5 * tv;
}

std::string PreactHistogram::to_csv() const {
    std::ostringstream os;
    os << "bin_lo,bin_hi,count\n";
    os << "-inf," << lo_ << "," << underflow_ << "\n";
    for (std::size_t b = 0; b < counts_.size(); ++b)
        os << bin_lo(b) << "," << bin_hi(b) << "," << counts_[b] << "\n";
    os << hi_ << ",+inf," << overflow_ << "\n";
    return os.str();
}

}  // namespace relusparse
