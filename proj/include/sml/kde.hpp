#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace sml {

struct EigenSampleSet {
    std::vector<double> samples;
    double bandwidth = 0;
    std::vector<std::array<double, 2>> curve;  // (x, density)
};

// Gaussian KDE over the samples: f(x) = 1/(B h) sum phi((x - s_i)/h).
// bandwidth <= 0 requests Scott's rule h = B^(-1/5) * std (ddof=1); a
// zero-variance sample set falls back to h = 0.01 * (1 + |mean|).
// The curve is 256 points spanning [min - 3h, max + 3h].
EigenSampleSet eigen_distribution(const std::vector<double>& samples, double bandwidth = 0);

// Trapezoidal integral of the curve; sanity metric for the tests.
double curve_integral(const EigenSampleSet& set);

}  // namespace sml
