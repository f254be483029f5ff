#include "chargescope/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "chargescope/random.hpp"

namespace chargescope {

namespace {

constexpr int kMinEvents = 8;
constexpr int kMaxEvents = 14;
constexpr int kMaskLength = 20;

ActivityEvent draw_event(Rng& rng, double load_time_s) {
    std::uniform_real_distribution<double> start(0.0, load_time_s);
    std::uniform_real_distribution<double> log_duration(std::log(0.03), std::log(0.4));
    std::uniform_real_distribution<double> amplitude(60.0, 400.0);
    std::bernoulli_distribution decaying(0.5);
    ActivityEvent e;
    e.start_s = start(rng);
    e.duration_s = std::exp(log_duration(rng));
    e.amplitude_ma = amplitude(rng);
    e.shape = decaying(rng) ? EventShape::exp_decay : EventShape::rect;
    return e;
}

struct EventRendering {
    double gain = 1.0;
    double shift_s = 0.0;
    double stretch = 1.0;
};

/// How one device renders each event of one site. Sites serve different
/// page variants per browser, so the rendering is keyed by both.
std::vector<EventRendering> device_mask(const std::string& device_name, int class_id) {
    Rng rng(derive_seed(hash_name(device_name), static_cast<std::uint64_t>(class_id)));
    std::uniform_real_distribution<double> log_factor(std::log(0.25), std::log(4.0));
    std::uniform_real_distribution<double> shift(-0.7, 0.7);
    std::uniform_real_distribution<double> log_stretch(std::log(0.5), std::log(2.0));
    std::vector<EventRendering> mask(kMaskLength);
    for (auto& m : mask) {
        m.gain = std::exp(log_factor(rng));
        m.shift_s = shift(rng);
        m.stretch = std::exp(log_stretch(rng));
    }
    return mask;
}

double event_value(const ActivityEvent& e, double t) {
    if (t < e.start_s) return 0.0;
    const double dt = t - e.start_s;
    if (e.shape == EventShape::rect) return dt < e.duration_s ? e.amplitude_ma : 0.0;
    if (dt >= 5.0 * e.duration_s) return 0.0;
    return e.amplitude_ma * std::exp(-dt / e.duration_s);
}

void check_fraction(double value, const char* what) {
    if (!(value >= 0.0 && value <= 1.0))
        throw std::invalid_argument(std::string(what) + " must lie in [0, 1]");
}

}  // namespace

void BatteryProfile::validate() const {
    if (!(i_top > 0.0 && i_top < i_max)) throw std::invalid_argument("need 0 < i_top < i_max");
    if (!(soc_cv > 0.0 && soc_cv < 1.0)) throw std::invalid_argument("need 0 < soc_cv < 1");
    if (!(tau_cv > 0.0)) throw std::invalid_argument("tau_cv must be positive");
    if (!(capacity_mah > 0.0)) throw std::invalid_argument("capacity must be positive");
}

double battery_current(double soc, const BatteryProfile& profile) {
    check_fraction(soc, "soc");
    if (soc < profile.soc_cv) return profile.i_max;
    if (soc >= 1.0) return profile.i_top;
    return profile.i_top +
           (profile.i_max - profile.i_top) * std::exp(-(soc - profile.soc_cv) / profile.tau_cv);
}

void LeakageRamp::validate() const {
    if (!(soc_zero >= 0.0 && soc_zero < soc_full && soc_full <= 1.0))
        throw std::invalid_argument("leakage ramp needs 0 <= soc_zero < soc_full <= 1");
}

double LeakageRamp::coupling(double soc) const {
    check_fraction(soc, "soc");
    if (soc < soc_zero) return 0.0;
    if (soc >= soc_full) return 1.0;
    return (soc - soc_zero) / (soc_full - soc_zero);
}

void DeviceProfile::validate() const {
    if (name.empty()) throw std::invalid_argument("device name must not be empty");
    if (wireless_ramp) wireless_ramp->validate();
    wired_ramp.validate();
    if (!(gain > 0.0)) throw std::invalid_argument("device gain must be positive");
    if (!(smoothing_ms >= 0.0)) throw std::invalid_argument("smoothing_ms must be >= 0");
    if (!(coil_smoothing_ms >= 0.0)) throw std::invalid_argument("coil_smoothing_ms must be >= 0");
    if (!(coil_gain > 0.0)) throw std::invalid_argument("coil_gain must be positive");
    if (!(time_scale > 0.0)) throw std::invalid_argument("time_scale must be positive");
    if (!(ripple_hz >= 0.0 && ripple_amp >= 0.0))
        throw std::invalid_argument("ripple parameters must be >= 0");
    if (!(noise_sd_wireless >= noise_sd_wired && noise_sd_wired >= 0.0))
        throw std::invalid_argument("need noise_sd_wireless >= noise_sd_wired >= 0");
}

const LeakageRamp& DeviceProfile::ramp(Channel channel) const {
    if (channel == Channel::wired) return wired_ramp;
    if (!wireless_ramp) throw std::invalid_argument("device '" + name + "' has no wireless charging");
    return *wireless_ramp;
}

DeviceProfile builtin_device(const std::string& name) {
    DeviceProfile d;
    d.name = name;
    if (name == "iphone11") return d;
    if (name == "pixel4") {
        d.gain = 1.3;
        d.smoothing_ms = 35.0;
        d.time_scale = 0.8;
        return d;
    }
    if (name == "iphone8") {
        d.wireless_ramp = LeakageRamp{0.70, 0.90};
        d.wired_ramp = LeakageRamp{0.30, 0.50};
        d.gain = 0.9;
        d.smoothing_ms = 25.0;
        d.time_scale = 1.2;
        return d;
    }
    if (name == "iphone6s") {
        d.wireless_ramp.reset();
        d.wired_ramp = LeakageRamp{0.30, 0.50};
        d.gain = 0.8;
        d.smoothing_ms = 30.0;
        d.time_scale = 1.4;
        return d;
    }
    throw std::invalid_argument("unknown device profile '" + name + "'");
}

std::vector<std::string> builtin_device_names() {
    return {"iphone11", "iphone8", "iphone6s", "pixel4"};
}

double leakage_coupling(double soc, const DeviceProfile& device, Channel channel) {
    return device.ramp(channel).coupling(soc);
}

void WebsiteSignature::validate() const {
    if (events.size() < 3 || events.size() > 20)
        throw std::invalid_argument("signature needs 3..20 events");
    for (const auto& e : events) {
        if (e.start_s < 0.0 || e.start_s > load_time_s)
            throw std::invalid_argument("event starts outside the load window");
        if (!(e.amplitude_ma > 0.0)) throw std::invalid_argument("event amplitude must be positive");
        if (!(e.duration_s > 0.0)) throw std::invalid_argument("event duration must be positive");
    }
}

WebsiteSignature make_signature(int class_id, std::uint64_t signature_seed) {
    if (class_id < 0) throw std::invalid_argument("class id must be non-negative");
    Rng rng(derive_seed(signature_seed, static_cast<std::uint64_t>(class_id)));
    WebsiteSignature sig;
    sig.class_id = class_id;
    sig.load_time_s = std::uniform_real_distribution<double>(3.5, 4.5)(rng);
    const int count = std::uniform_int_distribution<int>(kMinEvents, kMaxEvents)(rng);
    for (int i = 0; i < count; ++i) sig.events.push_back(draw_event(rng, sig.load_time_s));
    std::sort(sig.events.begin(), sig.events.end(),
              [](const ActivityEvent& a, const ActivityEvent& b) { return a.start_s < b.start_s; });
    sig.validate();
    return sig;
}

WebsiteSignature age_signature(const WebsiteSignature& sig, double drift, std::uint64_t seed) {
    check_fraction(drift, "drift");
    WebsiteSignature aged = sig;
    const auto n = sig.events.size();
    const auto replaced = static_cast<std::size_t>(std::llround(drift * static_cast<double>(n)));
    if (replaced == 0) return aged;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(sig.class_id)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < replaced; ++k)
        aged.events[order[k]] = draw_event(rng, sig.load_time_s);
    return aged;
}

void SimConfig::validate() const {
    if (classes <= 0 || traces_per_class <= 0) throw std::invalid_argument("counts must be positive");
    if (!(duration_s > 0.0)) throw std::invalid_argument("duration must be positive");
    if (fs <= 0) throw std::invalid_argument("sampling rate must be positive");
    if (soc.empty()) throw std::invalid_argument("soc schedule must not be empty");
    for (double s : soc) check_fraction(s, "soc");
    check_fraction(drift, "drift");
    if (jitter.shift_max_s < 0.0 || jitter.event_jitter_s < 0.0 || jitter.amp_jitter_frac < 0.0 ||
        jitter.amp_jitter_frac >= 1.0)
        throw std::invalid_argument("jitter parameters out of range");
    device.validate();
    device.ramp(channel);
    battery.validate();
}

double SimConfig::soc_for_trace(int index_in_class) const {
    return soc[static_cast<std::size_t>(index_in_class) % soc.size()];
}

CurrentTrace synth_trace(const WebsiteSignature& sig, const SimConfig& config,
                         std::uint64_t trace_seed, std::optional<double> soc_override) {
    config.validate();
    const double soc = soc_override.value_or(config.soc.front());
    const auto& device = config.device;
    const double alpha = leakage_coupling(soc, device, config.channel);
    const double base = battery_current(soc, config.battery);
    const auto count = static_cast<std::size_t>(std::llround(config.duration_s * config.fs));
    const double dt = 1.0 / config.fs;

    // Jitter and noise use separate streams: the noise realization must not
    // depend on how many events the signature has.
    Rng jitter_rng(derive_seed(trace_seed, 1));
    Rng noise_rng(derive_seed(trace_seed, 2));

    std::vector<double> activity(count, 0.0);
    {
        const auto& j = config.jitter;
        std::uniform_real_distribution<double> shift_dist(-j.shift_max_s, j.shift_max_s);
        std::normal_distribution<double> timing(0.0, 1.0);
        std::uniform_real_distribution<double> amp_dist(-j.amp_jitter_frac, j.amp_jitter_frac);
        const double shift = j.shift_max_s > 0.0 ? shift_dist(jitter_rng) : 0.0;
        const auto mask = device_mask(device.name, sig.class_id);

        for (std::size_t k = 0; k < sig.events.size(); ++k) {
            ActivityEvent e = sig.events[k];
            e.start_s += j.event_jitter_s * timing(jitter_rng);
            e.amplitude_ma *= 1.0 + (j.amp_jitter_frac > 0.0 ? amp_dist(jitter_rng) : 0.0);
            const auto& r = mask[k % mask.size()];
            e.amplitude_ma *= r.gain;
            e.start_s = std::max(0.0, e.start_s + r.shift_s);
            e.duration_s *= r.stretch;
            e.start_s *= device.time_scale;
            e.duration_s *= device.time_scale;
            for (std::size_t i = 0; i < count; ++i)
                activity[i] += event_value(e, static_cast<double>(i) * dt + shift);
        }
    }
    const bool wireless = config.channel == Channel::wireless;
    auto smooth = [&](double ms) {
        if (ms <= 0.0) return;
        const double a = dt / (ms * 1e-3 + dt);
        double state = 0.0;
        for (auto& v : activity) {
            state += a * (v - state);
            v = state;
        }
    };
    smooth(device.smoothing_ms);
    if (wireless) {
        smooth(device.coil_smoothing_ms);
        for (auto& v : activity) v *= device.coil_gain;
    }

    const double noise_sd = wireless ? device.noise_sd_wireless : device.noise_sd_wired;
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> samples(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double t = static_cast<double>(i) * dt;
        double v = base + alpha * device.gain * activity[i];
        if (wireless)
            v += device.ripple_amp * std::sin(2.0 * std::numbers::pi * device.ripple_hz * t);
        v += noise_sd * noise(noise_rng);
        samples[i] = std::max(v, 0.0);
    }

    TraceMeta meta;
    meta.device_profile = device.name;
    meta.channel = config.channel;
    meta.soc_start = soc;
    meta.seed = trace_seed;
    return CurrentTrace(std::move(samples), config.fs, sig.class_id, std::move(meta));
}

std::vector<WebsiteSignature> dataset_signatures(const SimConfig& config) {
    std::vector<WebsiteSignature> sigs;
    sigs.reserve(static_cast<std::size_t>(config.classes));
    for (int c = 0; c < config.classes; ++c) {
        auto sig = make_signature(c, config.signature_seed);
        if (config.drift > 0.0) sig = age_signature(sig, config.drift, config.aging_seed);
        sigs.push_back(std::move(sig));
    }
    return sigs;
}

TraceSet synth_dataset(const SimConfig& config) {
    config.validate();
    TraceSet set;
    const auto sigs = dataset_signatures(config);
    for (int c = 0; c < config.classes; ++c) {
        char name[16];
        std::snprintf(name, sizeof(name), "site%02d", c);
        set.class_names.emplace_back(name);
    }
    set.traces.reserve(static_cast<std::size_t>(config.classes * config.traces_per_class));
    for (int c = 0; c < config.classes; ++c) {
        for (int j = 0; j < config.traces_per_class; ++j) {
            const auto index = static_cast<std::uint64_t>(c) * config.traces_per_class + j;
            set.traces.push_back(synth_trace(sigs[static_cast<std::size_t>(c)], config,
                                             derive_seed(config.noise_seed, index),
                                             config.soc_for_trace(j)));
        }
    }
    return set;
}

}  // namespace chargescope
