#include "sml/kde.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "sml/errors.hpp"

namespace sml {

namespace {
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
constexpr std::size_t kCurvePoints = 256;
}  // namespace

EigenSampleSet eigen_distribution(const std::vector<double>& samples, double bandwidth) {
    if (samples.empty()) throw ArgumentError("kde: no samples");
    EigenSampleSet set;
    set.samples = samples;
    std::size_t B = samples.size();

    double mean = 0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(B);

    if (bandwidth > 0) {
        set.bandwidth = bandwidth;
    } else {
        if (B < 2) throw ArgumentError("kde: automatic bandwidth needs at least 2 samples");
        double var = 0;
        for (double s : samples) var += (s - mean) * (s - mean);
        var /= static_cast<double>(B - 1);
        double sd = std::sqrt(var);
        if (sd > 0) {
            set.bandwidth = std::pow(static_cast<double>(B), -0.2) * sd;
        } else {
            set.bandwidth = 0.01 * (1.0 + std::abs(mean));
            std::cerr << "warning: zero-variance samples; kde bandwidth fallback "
                      << set.bandwidth << "\n";
        }
    }

    double lo = *std::min_element(samples.begin(), samples.end()) - 3.0 * set.bandwidth;
    double hi = *std::max_element(samples.begin(), samples.end()) + 3.0 * set.bandwidth;
    set.curve.resize(kCurvePoints);
    for (std::size_t i = 0; i < kCurvePoints; ++i) {
        double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kCurvePoints - 1);
        double acc = 0;
        for (double s : samples) {
            double u = (x - s) / set.bandwidth;
            acc += kInvSqrt2Pi * std::exp(-0.5 * u * u);
        }
        set.curve[i] = {x, acc / (static_cast<double>(B) * set.bandwidth)};
    }
    return set;
}

double curve_integral(const EigenSampleSet& set) {
    double acc = 0;
    for (std::size_t i = 1; i < set.curve.size(); ++i) {
        double dx = set.curve[i][0] - set.curve[i - 1][0];
        acc += 0.5 * dx * (set.curve[i][1] + set.curve[i - 1][1]);
    }
    return acc;
}

}  // namespace sml
