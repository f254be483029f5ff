#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace chargescope {

enum class Channel { wireless, wired };

std::string to_string(Channel channel);
Channel parse_channel(const std::string& text);

/// Raised for malformed trace files; carries the offending line number.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what);
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct TraceMeta {
    std::string device_profile = "unknown";
    Channel channel = Channel::wireless;
    double soc_start = 1.0;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> collected_at;
    /// Set by signal-processing countermeasures; filtered traces may ring below zero.
    bool filtered = false;

    bool operator==(const TraceMeta&) const = default;
};

/// A labeled series of charger current samples in milliamps.
///
/// Immutable after construction. The constructor enforces the sample
/// invariants: every value finite, and non-negative unless `meta.filtered`.
class CurrentTrace {
public:
    CurrentTrace(std::vector<double> samples, int sampling_rate, std::optional<int> label,
                 TraceMeta meta);

    std::span<const double> samples() const { return samples_; }
    const std::vector<double>& sample_vector() const { return samples_; }
    std::size_t size() const { return samples_.size(); }
    int sampling_rate() const { return sampling_rate_; }
    double duration_s() const { return static_cast<double>(samples_.size()) / sampling_rate_; }
    const std::optional<int>& label() const { return label_; }
    const TraceMeta& meta() const { return meta_; }

    bool operator==(const CurrentTrace&) const = default;

private:
    std::vector<double> samples_;
    int sampling_rate_;
    std::optional<int> label_;
    TraceMeta meta_;
};

struct TraceSet {
    std::vector<CurrentTrace> traces;
    std::vector<std::string> class_names;

    /// Throws if labels exceed the class count or sampling rates differ.
    void validate() const;
    std::size_t class_count() const { return class_names.size(); }
};

void write_trace(const CurrentTrace& trace, const std::filesystem::path& path);
CurrentTrace read_trace(const std::filesystem::path& path);

/// Reads a sensor log: one current value per line, or `timestamp,current` pairs.
/// Lines starting with '#' and a non-numeric first line (column header) are skipped.
CurrentTrace read_logger_csv(const std::filesystem::path& path, int sampling_rate,
                             std::optional<int> label, TraceMeta meta);

/// Shortest decimal string that parses back to exactly `value`.
std::string format_double(double value);

CurrentTrace slice_prefix(const CurrentTrace& trace, double n_seconds);
CurrentTrace resample(const CurrentTrace& trace, int fs_new);

/// Writes `traces/trace_NNNNN.csv`, `manifest.csv` and `classes.txt` under `dir`.
void write_dataset(const TraceSet& set, const std::filesystem::path& dir);
TraceSet read_dataset(const std::filesystem::path& dir);

}  // namespace chargescope
