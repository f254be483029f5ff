#include "chargescope/fft.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace chargescope::baseline {

std::size_t next_power_of_two(std::size_t n) {
    return n <= 1 ? 1 : std::bit_ceil(n);
}

void fft_inplace(std::vector<std::complex<double>>& data, bool inverse) {
    const std::size_t n = data.size();
    if (n == 0 || !std::has_single_bit(n)) throw std::invalid_argument("FFT size must be a power of two");

    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(data[i], data[j]);
    }

    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
        const std::size_t half = len / 2;
        for (std::size_t start = 0; start < n; start += len) {
            for (std::size_t k = 0; k < half; ++k) {
                // Twiddles computed directly rather than by recurrence to keep rounding flat.
                const std::complex<double> w(std::cos(angle * static_cast<double>(k)),
                                             std::sin(angle * static_cast<double>(k)));
                const auto u = data[start + k];
                const auto v = data[start + k + half] * w;
                data[start + k] = u + v;
                data[start + k + half] = u - v;
            }
        }
    }
    if (inverse)
        for (auto& x : data) x /= static_cast<double>(n);
}

SpectrumFeatures fft_magnitude(std::span<const double> signal, double sampling_rate) {
    if (signal.empty()) throw std::invalid_argument("cannot transform an empty signal");
    const std::size_t n = next_power_of_two(signal.size());
    std::vector<std::complex<double>> data(n);
    for (std::size_t i = 0; i < signal.size(); ++i) data[i] = signal[i];
    fft_inplace(data);
    SpectrumFeatures out;
    out.magnitudes.resize(n / 2 + 1);
    for (std::size_t k = 0; k <= n / 2; ++k) out.magnitudes[k] = std::abs(data[k]);
    out.bin_hz = sampling_rate / static_cast<double>(n);
    return out;
}

SpectrumFeatures fft_magnitude(const CurrentTrace& trace) {
    return fft_magnitude(trace.samples(), trace.sampling_rate());
}

}  // namespace chargescope::baseline
