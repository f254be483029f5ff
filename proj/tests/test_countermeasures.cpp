#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "chargescope/countermeasures.hpp"

using namespace chargescope;

namespace {

std::vector<double> sine(double hz, double fs, std::size_t n, double amp = 1.0) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = amp * std::sin(2.0 * std::numbers::pi * hz * i / fs);
    return v;
}

double peak_in(const std::vector<double>& v, std::size_t from, std::size_t to) {
    double m = 0.0;
    for (std::size_t i = from; i < to; ++i) m = std::max(m, std::abs(v[i]));
    return m;
}

}  // namespace

TEST(Lowpass, TapsAndResponse) {
    const auto taps = design_lowpass(60.0, 700.0);
    ASSERT_EQ(taps.size(), 101u);
    EXPECT_NEAR(std::accumulate(taps.begin(), taps.end(), 0.0), 1.0, 1e-12);
    for (std::size_t i = 0; i < taps.size(); ++i) EXPECT_NEAR(taps[i], taps[taps.size() - 1 - i], 1e-15);
    EXPECT_NEAR(fir_magnitude(taps, 11.0, 700.0), 1.0, 0.01);
    EXPECT_LE(20.0 * std::log10(fir_magnitude(taps, 200.0, 700.0)), -40.0);
    EXPECT_THROW(design_lowpass(350.0, 700.0), std::invalid_argument);
    EXPECT_THROW(design_lowpass(60.0, 700.0, 100), std::invalid_argument);
}

TEST(Lowpass, SignalsThroughFilter) {
    const auto taps = design_lowpass(60.0, 700.0);
    const std::vector<double> dc(2000, 250.0);
    for (double v : fir_filter_zero_delay(dc, taps)) EXPECT_NEAR(v, 250.0, 0.25);

    // Measured away from the edges, where the reflection padding does not reach.
    const auto slow = fir_filter_zero_delay(sine(11.0, 700.0, 7000), taps);
    ASSERT_EQ(slow.size(), 7000u);
    EXPECT_NEAR(peak_in(slow, 200, 6800), 1.0, 0.01);
    // Zero delay: the filtered tone stays in phase with the input.
    const auto in = sine(11.0, 700.0, 7000);
    for (std::size_t i = 200; i < 6800; i += 97) EXPECT_NEAR(slow[i], in[i], 0.01);

    const auto fast = fir_filter_zero_delay(sine(200.0, 700.0, 7000), taps);
    EXPECT_LE(peak_in(fast, 200, 6800), 0.01);
}

TEST(Lowpass, Linear) {
    const auto taps = design_lowpass(60.0, 700.0);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0.0, 100.0);
    std::vector<double> x(1500), y(1500), mix(1500);
    const double a = 2.5, b = -0.75;
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = g(rng);
        y[i] = g(rng);
        mix[i] = a * x[i] + b * y[i];
    }
    const auto fx = fir_filter_zero_delay(x, taps);
    const auto fy = fir_filter_zero_delay(y, taps);
    const auto fm = fir_filter_zero_delay(mix, taps);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(fm[i], a * fx[i] + b * fy[i], 1e-9);
}

TEST(Lowpass, TraceWrapper) {
    std::vector<double> v(700);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 2 ? 0.0 : 500.0;
    const CurrentTrace t(v, 700, 3, TraceMeta{});
    const auto f = lowpass_filter(t);
    EXPECT_EQ(f.size(), t.size());
    EXPECT_TRUE(f.meta().filtered);
    EXPECT_EQ(f.label(), t.label());
    // Short signals still work: reflection covers the filter half-length.
    const CurrentTrace short_trace(std::vector<double>(60, 1.0), 700, 0, TraceMeta{});
    EXPECT_EQ(lowpass_filter(short_trace).size(), 60u);
}

TEST(ChargeCap, Policy) {
    SimConfig c;
    c.soc = {1.0, 0.95, 0.7};
    const auto capped = charge_cap_policy(c, 0.80);
    EXPECT_EQ(capped.soc, (std::vector<double>{0.80, 0.80, 0.7}));
    for (double soc : capped.soc) EXPECT_EQ(leakage_coupling(soc, capped.device, Channel::wireless), 0.0);
    EXPECT_EQ(charge_cap_policy(c, 1.0).soc, c.soc);
    EXPECT_NEAR(leakage_coupling(charge_cap_policy(c, 0.85).soc[0], c.device, Channel::wireless), 0.5, 1e-12);
    EXPECT_THROW(charge_cap_policy(c, 0.0), std::invalid_argument);
    EXPECT_THROW(charge_cap_policy(c, 1.2), std::invalid_argument);

    // Never increases coupling, on any channel or device.
    for (const auto& name : builtin_device_names())
        for (double cap = 0.05; cap <= 1.0; cap += 0.05)
            for (double soc = 0.0; soc <= 1.0; soc += 0.05) {
                SimConfig s;
                s.device = builtin_device(name);
                s.soc = {soc};
                const auto after = charge_cap_policy(s, cap).soc[0];
                EXPECT_LE(leakage_coupling(after, s.device, Channel::wired),
                          leakage_coupling(soc, s.device, Channel::wired));
            }

    // At the cap every generated trace is label-free.
    SimConfig sim;
    sim.classes = 3;
    sim.traces_per_class = 2;
    sim.duration_s = 0.5;
    const auto set = synth_dataset(charge_cap_policy(sim, 0.80));
    EXPECT_EQ(set.traces[0].sample_vector(), synth_trace(make_signature(1, sim.signature_seed),
                                                         charge_cap_policy(sim, 0.8),
                                                         set.traces[0].meta().seed.value())
                                                 .sample_vector());
}
