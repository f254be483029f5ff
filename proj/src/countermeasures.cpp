#include "chargescope/countermeasures.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

namespace chargescope {

std::vector<double> design_lowpass(double cutoff_hz, double fs, std::size_t taps) {
    if (!(fs > 0.0)) throw std::invalid_argument("sampling rate must be positive");
    if (!(cutoff_hz > 0.0)) throw std::invalid_argument("cutoff must be positive");
    if (cutoff_hz >= fs / 2.0)
        throw std::invalid_argument("cutoff must lie below the Nyquist frequency");
    if (taps < 3 || taps % 2 == 0) throw std::invalid_argument("tap count must be odd and >= 3");

    const double fc = cutoff_hz / fs;
    const auto mid = static_cast<double>(taps - 1) / 2.0;
    std::vector<double> h(taps);
    for (std::size_t i = 0; i < taps; ++i) {
        const double m = static_cast<double>(i) - mid;
        const double sinc = m == 0.0 ? 2.0 * fc
                                     : std::sin(2.0 * std::numbers::pi * fc * m) / (std::numbers::pi * m);
        const double window =
            0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                   static_cast<double>(taps - 1));
        h[i] = sinc * window;
    }
    double sum = 0.0;
    for (double v : h) sum += v;
    for (auto& v : h) v /= sum;
    return h;
}

double fir_magnitude(std::span<const double> taps, double freq_hz, double fs) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < taps.size(); ++i)
        acc += taps[i] * std::polar(1.0, -2.0 * std::numbers::pi * freq_hz / fs * static_cast<double>(i));
    return std::abs(acc);
}

std::vector<double> fir_filter_zero_delay(std::span<const double> signal,
                                          std::span<const double> taps) {
    const auto n = static_cast<long long>(signal.size());
    const auto half = static_cast<long long>(taps.size() / 2);
    if (n == 0) return {};
    auto at = [&](long long i) {
        // Reflection without repeating the edge sample: x[-1] = x[1], x[n] = x[n-2].
        if (n == 1) return signal[0];
        const long long period = 2 * (n - 1);
        long long j = i % period;
        if (j < 0) j += period;
        if (j >= n) j = period - j;
        return signal[static_cast<std::size_t>(j)];
    };
    std::vector<double> out(signal.size());
    for (long long i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < taps.size(); ++k)
            acc += taps[k] * at(i + half - static_cast<long long>(k));
        out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
}

CurrentTrace lowpass_filter(const CurrentTrace& trace, double cutoff_hz, std::size_t taps) {
    const auto h = design_lowpass(cutoff_hz, trace.sampling_rate(), taps);
    auto meta = trace.meta();
    meta.filtered = true;
    return CurrentTrace(fir_filter_zero_delay(trace.samples(), h), trace.sampling_rate(),
                        trace.label(), std::move(meta));
}

SimConfig charge_cap_policy(const SimConfig& config, double cap) {
    if (!(cap > 0.0 && cap <= 1.0)) throw std::invalid_argument("charge cap must lie in (0, 1]");
    SimConfig capped = config;
    for (auto& s : capped.soc) s = std::min(s, cap);
    return capped;
}

}  // namespace chargescope
