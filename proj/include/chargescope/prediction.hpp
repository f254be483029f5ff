#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace chargescope {

/// Classifier output for one window.
struct SegmentPrediction {
    std::vector<double> probabilities;
    int label = 0;  // argmax, lowest index on ties
};

inline int argmax_lowest(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("argmax of an empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return static_cast<int>(best);
}

}  // namespace chargescope
