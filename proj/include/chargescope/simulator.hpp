#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chargescope/trace.hpp"

namespace chargescope {

/// Li-ion charge curve: constant current up to `soc_cv`, then an
/// exponential decay toward the topping current.
struct BatteryProfile {
    double i_max = 1000.0;
    double i_top = 50.0;
    double soc_cv = 0.80;
    double tau_cv = 0.08;
    double capacity_mah = 3000.0;

    void validate() const;
};

double battery_current(double soc, const BatteryProfile& profile);

/// Piecewise-linear coupling: 0 below `soc_zero`, 1 at/above `soc_full`.
struct LeakageRamp {
    double soc_zero = 0.80;
    double soc_full = 0.90;

    void validate() const;
    double coupling(double soc) const;
};

struct DeviceProfile {
    std::string name = "iphone11";
    /// Absent when the handset cannot charge wirelessly.
    std::optional<LeakageRamp> wireless_ramp = LeakageRamp{0.80, 0.90};
    LeakageRamp wired_ramp{0.80, 0.95};
    double gain = 1.0;
    double smoothing_ms = 20.0;
    /// Stretches the whole activity timeline; models CPU speed differences.
    double time_scale = 1.0;
    /// Extra low-pass and efficiency of the charging coil, wireless only.
    double coil_smoothing_ms = 40.0;
    double coil_gain = 0.75;
    double ripple_hz = 11.0;
    double ripple_amp = 15.0;
    double noise_sd_wireless = 8.0;
    double noise_sd_wired = 3.0;

    void validate() const;
    const LeakageRamp& ramp(Channel channel) const;
};

/// Built-in profiles: iphone11, iphone8, iphone6s, pixel4.
DeviceProfile builtin_device(const std::string& name);
std::vector<std::string> builtin_device_names();

double leakage_coupling(double soc, const DeviceProfile& device, Channel channel);

enum class EventShape { rect, exp_decay };

struct ActivityEvent {
    double start_s = 0.0;
    double duration_s = 0.0;
    double amplitude_ma = 0.0;
    EventShape shape = EventShape::rect;

    bool operator==(const ActivityEvent&) const = default;
};

struct WebsiteSignature {
    int class_id = 0;
    std::vector<ActivityEvent> events;
    double load_time_s = 4.0;

    void validate() const;
    bool operator==(const WebsiteSignature&) const = default;
};

WebsiteSignature make_signature(int class_id, std::uint64_t signature_seed);

/// Replaces round(drift * event count) events with fresh draws from the
/// signature prior. Replaced events keep their index.
WebsiteSignature age_signature(const WebsiteSignature& sig, double drift, std::uint64_t seed);

struct JitterConfig {
    double shift_max_s = 0.3;
    double event_jitter_s = 0.05;
    double amp_jitter_frac = 0.1;
};

struct SimConfig {
    int classes = 20;
    int traces_per_class = 50;
    double duration_s = 10.0;
    int fs = 700;
    DeviceProfile device;
    BatteryProfile battery;
    Channel channel = Channel::wireless;
    /// Trace j of every class charges at soc[j % soc.size()].
    std::vector<double> soc{1.0};
    std::uint64_t signature_seed = 42;
    std::uint64_t noise_seed = 7;
    JitterConfig jitter;
    double drift = 0.0;
    std::uint64_t aging_seed = 99;

    void validate() const;
    double soc_for_trace(int index_in_class) const;
};

/// One synthetic charger trace. `soc` overrides the config schedule.
CurrentTrace synth_trace(const WebsiteSignature& sig, const SimConfig& config,
                         std::uint64_t trace_seed, std::optional<double> soc = std::nullopt);

/// Signatures used by synth_dataset, aged by `config.drift`.
std::vector<WebsiteSignature> dataset_signatures(const SimConfig& config);

/// classes x traces_per_class traces, class-major order.
TraceSet synth_dataset(const SimConfig& config);

}  // namespace chargescope
