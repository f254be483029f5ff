#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chargescope/fft.hpp"
#include "chargescope/simulator.hpp"

using namespace chargescope;

TEST(Battery, ChargeCurve) {
    const BatteryProfile p;
    EXPECT_DOUBLE_EQ(battery_current(0.5, p), 1000.0);
    EXPECT_DOUBLE_EQ(battery_current(1.0, p), 50.0);
    EXPECT_NEAR(battery_current(0.9, p), 50.0 + 950.0 * std::exp(-1.25), 1e-9);
    EXPECT_NEAR(battery_current(0.9, p), 322.2, 0.05);
    // Continuous at the knee, non-increasing after it.
    EXPECT_NEAR(battery_current(p.soc_cv, p), p.i_max, 1e-9);
    double prev = battery_current(p.soc_cv, p);
    for (double soc = p.soc_cv; soc <= 1.0; soc += 0.001) {
        const double now = battery_current(soc, p);
        EXPECT_LE(now, prev + 1e-12);
        prev = now;
    }
    EXPECT_THROW(battery_current(1.5, p), std::invalid_argument);
}

TEST(Leakage, RampsAndPresets) {
    const auto iphone11 = builtin_device("iphone11");
    EXPECT_EQ(leakage_coupling(0.75, iphone11, Channel::wireless), 0.0);
    EXPECT_NEAR(leakage_coupling(0.85, iphone11, Channel::wireless), 0.5, 1e-12);
    for (const auto& name : builtin_device_names()) {
        const auto d = builtin_device(name);
        EXPECT_EQ(leakage_coupling(1.0, d, Channel::wired), 1.0) << name;
        double prev = 0.0;
        for (double soc = 0.0; soc <= 1.0; soc += 0.01) {
            const double a = leakage_coupling(soc, d, Channel::wired);
            EXPECT_GE(a, prev);
            prev = a;
        }
    }
    EXPECT_THROW(builtin_device("iphone6s").ramp(Channel::wireless), std::invalid_argument);
    EXPECT_EQ(builtin_device("iphone8").wired_ramp.soc_zero, 0.30);
    EXPECT_THROW(builtin_device("nokia"), std::invalid_argument);
}

TEST(Signature, DeterministicAndDistinct) {
    const auto a = make_signature(0, 42);
    EXPECT_EQ(a, make_signature(0, 42));
    EXPECT_NE(a.events, make_signature(1, 42).events);
    EXPECT_NE(a.events, make_signature(0, 43).events);
    for (const auto& e : a.events) {
        EXPECT_GE(e.start_s, 0.0);
        EXPECT_LE(e.start_s, a.load_time_s);
    }
}

TEST(Signature, AgingCounts) {
    WebsiteSignature sig = make_signature(3, 42);
    sig.events.resize(10);
    EXPECT_EQ(age_signature(sig, 0.0, 5), sig);

    auto retained = [&](const WebsiteSignature& aged) {
        int same = 0;
        for (std::size_t i = 0; i < sig.events.size(); ++i) same += aged.events[i] == sig.events[i];
        return same;
    };
    EXPECT_EQ(retained(age_signature(sig, 0.5, 5)), 5);
    EXPECT_EQ(retained(age_signature(sig, 1.0, 5)), 0);
    EXPECT_EQ(age_signature(sig, 0.5, 5), age_signature(sig, 0.5, 5));
    EXPECT_THROW(age_signature(sig, 1.2, 5), std::invalid_argument);
}

TEST(Synth, LengthAndBounds) {
    SimConfig c;
    const auto t = synth_trace(make_signature(0, 42), c, 1);
    EXPECT_EQ(t.size(), 7000u);
    EXPECT_EQ(t.sampling_rate(), 700);
    for (double v : t.samples()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
    }
}

TEST(Synth, NoCouplingMeansNoLabelInformation) {
    SimConfig c;
    c.soc = {0.5};
    const auto a = synth_trace(make_signature(0, 42), c, 9);
    const auto b = synth_trace(make_signature(5, 42), c, 9);
    EXPECT_EQ(a.sample_vector(), b.sample_vector());
}

TEST(Synth, RippleOnlyOnWireless) {
    // No coupling, so the spectrum holds only ripple and noise. The mean is
    // removed first so the charging current does not leak into nearby bins.
    SimConfig c;
    c.soc = {0.5};
    const auto sig = make_signature(0, 42);
    auto spectrum = [](const CurrentTrace& t) {
        std::vector<double> x(t.samples().begin(), t.samples().end());
        const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        for (auto& v : x) v -= mean;
        return baseline::fft_magnitude(x, t.sampling_rate());
    };
    auto near_11 = [](const baseline::SpectrumFeatures& s) {
        const auto bin = static_cast<std::size_t>(std::lround(11.0 / s.bin_hz));
        return *std::max_element(s.magnitudes.begin() + static_cast<std::ptrdiff_t>(bin - 2),
                                 s.magnitudes.begin() + static_cast<std::ptrdiff_t>(bin + 3));
    };
    auto floor_of = [](const baseline::SpectrumFeatures& s) {
        auto m = s.magnitudes;
        std::nth_element(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(m.size() / 2), m.end());
        return m[m.size() / 2];
    };

    c.channel = Channel::wireless;
    const auto wl = spectrum(synth_trace(sig, c, 4));
    const auto peak = static_cast<std::size_t>(std::max_element(wl.magnitudes.begin(), wl.magnitudes.end()) -
                                               wl.magnitudes.begin());
    EXPECT_NEAR(static_cast<double>(peak) * wl.bin_hz, 11.0, wl.bin_hz);
    EXPECT_GT(near_11(wl), 20.0 * floor_of(wl));

    c.channel = Channel::wired;
    const auto wd = spectrum(synth_trace(sig, c, 4));
    EXPECT_LT(near_11(wd), 5.0 * floor_of(wd));
}

TEST(Synth, PrefixConsistency) {
    SimConfig c;
    c.fs = 500;
    c.duration_s = 6.0;
    const auto sig = make_signature(2, 42);
    const auto longer = synth_trace(sig, c, 77);
    c.duration_s = 2.5;
    const auto shorter = synth_trace(sig, c, 77);
    EXPECT_TRUE(std::equal(shorter.samples().begin(), shorter.samples().end(), longer.samples().begin()));
}

TEST(Dataset, CountsLabelsDeterminism) {
    SimConfig c;
    c.duration_s = 0.2;
    EXPECT_EQ(synth_dataset(c).traces.size(), 1000u);

    c.classes = 2;
    c.traces_per_class = 1;
    const auto tiny = synth_dataset(c);
    ASSERT_EQ(tiny.traces.size(), 2u);
    EXPECT_EQ(*tiny.traces[0].label(), 0);
    EXPECT_EQ(*tiny.traces[1].label(), 1);
    EXPECT_EQ(tiny.class_count(), 2u);

    c.classes = 3;
    c.traces_per_class = 4;
    c.soc = {1.0, 0.9};
    const auto a = synth_dataset(c);
    const auto b = synth_dataset(c);
    EXPECT_EQ(a.traces, b.traces);
    EXPECT_EQ(a.traces[1].meta().soc_start, 0.9);
    EXPECT_EQ(a.traces[2].meta().soc_start, 1.0);
}

TEST(Dataset, DevicesDiffer) {
    SimConfig c;
    c.duration_s = 2.0;
    const auto sig = make_signature(0, 42);
    const auto a = synth_trace(sig, c, 3);
    c.device = builtin_device("pixel4");
    const auto b = synth_trace(sig, c, 3);
    EXPECT_NE(a.sample_vector(), b.sample_vector());
}

TEST(Config, Validation) {
    SimConfig c;
    c.drift = 1.5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = SimConfig{};
    c.device = builtin_device("iphone6s");
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.channel = Channel::wired;
    EXPECT_NO_THROW(c.validate());
    c.device.noise_sd_wired = 100.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}
