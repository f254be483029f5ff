#pragma once

#include <complex>
#include <span>
#include <vector>

#include "chargescope/trace.hpp"

namespace chargescope::baseline {

std::size_t next_power_of_two(std::size_t n);

/// In-place iterative radix-2 transform. Size must be a power of two.
/// The inverse includes the 1/N factor.
void fft_inplace(std::vector<std::complex<double>>& data, bool inverse = false);

struct SpectrumFeatures {
    std::vector<double> magnitudes;  // bins 0..N/2
    double bin_hz = 0.0;
};

/// Zero-pads to the next power of two and returns |X[k]| for k = 0..N/2.
SpectrumFeatures fft_magnitude(std::span<const double> signal, double sampling_rate = 1.0);
SpectrumFeatures fft_magnitude(const CurrentTrace& trace);

}  // namespace chargescope::baseline
