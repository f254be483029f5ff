#include "chargescope/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace chargescope {

namespace {

constexpr const char* kTraceMagic = "# chargescope-trace v1";

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::optional<double> parse_number(const std::string& text) {
    double value = 0.0;
    const char* begin = text.data();
    const char* end = text.data() + text.size();
    if (begin != end && *begin == '+') ++begin;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) return std::nullopt;
    return value;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream stream(line);
    std::string field;
    while (std::getline(stream, field, ',')) fields.push_back(trim(field));
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

}  // namespace

std::string to_string(Channel channel) {
    return channel == Channel::wireless ? "wireless" : "wired";
}

Channel parse_channel(const std::string& text) {
    if (text == "wireless") return Channel::wireless;
    if (text == "wired") return Channel::wired;
    throw std::invalid_argument("unknown channel '" + text + "' (expected wireless or wired)");
}

ParseError::ParseError(const std::string& path, std::size_t line, const std::string& what)
    : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}

CurrentTrace::CurrentTrace(std::vector<double> samples, int sampling_rate,
                           std::optional<int> label, TraceMeta meta)
    : samples_(std::move(samples)), sampling_rate_(sampling_rate), label_(label),
      meta_(std::move(meta)) {
    if (sampling_rate_ <= 0) throw std::invalid_argument("sampling rate must be positive");
    if (label_ && *label_ < 0) throw std::invalid_argument("label must be non-negative");
    if (!(meta_.soc_start >= 0.0 && meta_.soc_start <= 1.0))
        throw std::invalid_argument("soc_start must lie in [0, 1]");
    for (std::size_t i = 0; i < samples_.size(); ++i) {
        const double v = samples_[i];
        if (!std::isfinite(v))
            throw std::invalid_argument("sample " + std::to_string(i) + " is not finite");
        if (v < 0.0 && !meta_.filtered)
            throw std::invalid_argument("sample " + std::to_string(i) + " is negative");
    }
}

void TraceSet::validate() const {
    if (traces.empty()) return;
    const int fs = traces.front().sampling_rate();
    for (std::size_t i = 0; i < traces.size(); ++i) {
        const auto& t = traces[i];
        if (t.sampling_rate() != fs)
            throw std::invalid_argument("trace " + std::to_string(i) +
                                        " has a different sampling rate");
        if (t.label() && static_cast<std::size_t>(*t.label()) >= class_names.size())
            throw std::invalid_argument("trace " + std::to_string(i) +
                                        " label exceeds class count");
    }
}

std::string format_double(double value) {
    char buffer[64];
    auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    if (ec != std::errc()) throw std::runtime_error("cannot format number");
    return std::string(buffer, ptr);
}

void write_trace(const CurrentTrace& trace, const std::filesystem::path& path) {
    std::string body;
    body.reserve(trace.size() * 10 + 256);
    body += kTraceMagic;
    body += '\n';
    body += "# label=" + (trace.label() ? std::to_string(*trace.label()) : "unlabeled") + '\n';
    const auto& meta = trace.meta();
    body += "# device=" + meta.device_profile + '\n';
    body += "# channel=" + to_string(meta.channel) + '\n';
    body += "# fs_hz=" + std::to_string(trace.sampling_rate()) + '\n';
    body += "# soc_start=" + format_double(meta.soc_start) + '\n';
    if (meta.seed) body += "# seed=" + std::to_string(*meta.seed) + '\n';
    if (meta.collected_at) body += "# collected_at=" + *meta.collected_at + '\n';
    if (meta.filtered) body += "# filtered=true\n";
    for (double v : trace.samples()) {
        body += format_double(v);
        body += '\n';
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

CurrentTrace read_trace(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const std::string name = path.string();

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line) || trim(line) != kTraceMagic)
        throw ParseError(name, 1, "missing '# chargescope-trace v1' header");
    line_no = 1;

    std::map<std::string, std::string> keys;
    std::vector<double> samples;
    bool in_header = true;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (in_header && !text.empty() && text.front() == '#') {
            const auto eq = text.find('=');
            if (eq == std::string::npos || text.size() < 3 || text[1] != ' ')
                throw ParseError(name, line_no, "malformed header line '" + text + "'");
            const std::string key = trim(text.substr(2, eq - 2));
            if (keys.contains(key)) throw ParseError(name, line_no, "duplicate key '" + key + "'");
            keys[key] = trim(text.substr(eq + 1));
            continue;
        }
        in_header = false;
        if (text.empty()) continue;
        const auto value = parse_number(text);
        if (!value) throw ParseError(name, line_no, "non-numeric sample '" + text + "'");
        if (!std::isfinite(*value)) throw ParseError(name, line_no, "non-finite sample");
        const auto filtered = keys.find("filtered");
        if (*value < 0.0 && (filtered == keys.end() || filtered->second != "true"))
            throw ParseError(name, line_no, "negative current");
        samples.push_back(*value);
    }

    auto require = [&](const std::string& key) -> const std::string& {
        auto it = keys.find(key);
        if (it == keys.end()) throw ParseError(name, 1, "missing header key '" + key + "'");
        return it->second;
    };
    static const std::vector<std::string> known = {"label",     "device", "channel",
                                                   "fs_hz",     "soc_start", "seed",
                                                   "collected_at", "filtered"};
    for (const auto& [key, value] : keys)
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ParseError(name, 1, "unknown header key '" + key + "'");

    TraceMeta meta;
    meta.device_profile = require("device");
    try {
        meta.channel = parse_channel(require("channel"));
    } catch (const std::invalid_argument& e) {
        throw ParseError(name, 1, e.what());
    }
    const auto soc = parse_number(require("soc_start"));
    if (!soc || *soc < 0.0 || *soc > 1.0) throw ParseError(name, 1, "invalid soc_start");
    meta.soc_start = *soc;
    if (keys.contains("seed")) {
        std::uint64_t seed = 0;
        const auto& s = keys["seed"];
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
        if (ec != std::errc() || ptr != s.data() + s.size())
            throw ParseError(name, 1, "invalid seed");
        meta.seed = seed;
    }
    if (keys.contains("collected_at")) meta.collected_at = keys["collected_at"];
    if (keys.contains("filtered")) meta.filtered = keys["filtered"] == "true";

    int fs = 0;
    {
        const auto& s = require("fs_hz");
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), fs);
        if (ec != std::errc() || ptr != s.data() + s.size() || fs <= 0)
            throw ParseError(name, 1, "invalid fs_hz");
    }
    std::optional<int> label;
    {
        const auto& s = require("label");
        if (s != "unlabeled") {
            int value = 0;
            auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
            if (ec != std::errc() || ptr != s.data() + s.size() || value < 0)
                throw ParseError(name, 1, "invalid label '" + s + "'");
            label = value;
        }
    }

    return CurrentTrace(std::move(samples), fs, label, std::move(meta));
}

CurrentTrace read_logger_csv(const std::filesystem::path& path, int sampling_rate,
                             std::optional<int> label, TraceMeta meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const std::string name = path.string();
    std::vector<double> samples;
    std::string line;
    std::size_t line_no = 0;
    bool first_data_line = true;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (text.empty() || text.front() == '#') continue;
        const auto fields = split_csv(text);
        const std::string& field = fields.back();
        const auto value = parse_number(field);
        if (!value) {
            if (first_data_line) {
                first_data_line = false;
                continue;
            }
            throw ParseError(name, line_no, "non-numeric sample '" + field + "'");
        }
        first_data_line = false;
        if (fields.size() > 2) throw ParseError(name, line_no, "expected at most two columns");
        if (!std::isfinite(*value)) throw ParseError(name, line_no, "non-finite sample");
        if (*value < 0.0) throw ParseError(name, line_no, "negative current");
        samples.push_back(*value);
    }
    return CurrentTrace(std::move(samples), sampling_rate, label, std::move(meta));
}

CurrentTrace slice_prefix(const CurrentTrace& trace, double n_seconds) {
    if (!(n_seconds > 0.0)) throw std::invalid_argument("slice length must be positive");
    const double exact = n_seconds * trace.sampling_rate();
    const auto count = static_cast<std::size_t>(std::llround(exact));
    if (count > trace.size())
        throw std::invalid_argument("cannot take " + format_double(n_seconds) + " s from a " +
                                    format_double(trace.duration_s()) + " s trace");
    std::vector<double> head(trace.samples().begin(),
                             trace.samples().begin() + static_cast<std::ptrdiff_t>(count));
    return CurrentTrace(std::move(head), trace.sampling_rate(), trace.label(), trace.meta());
}

CurrentTrace resample(const CurrentTrace& trace, int fs_new) {
    if (fs_new < 1) throw std::invalid_argument("target rate must be at least 1 Hz");
    if (fs_new == trace.sampling_rate()) return trace;
    const auto src = trace.samples();
    const auto count =
        static_cast<std::size_t>(std::llround(trace.duration_s() * fs_new));
    std::vector<double> out(count);
    if (count == 0 || src.empty()) {
        return CurrentTrace(std::vector<double>(count, src.empty() ? 0.0 : src.front()), fs_new,
                            trace.label(), trace.meta());
    }
    if (count == 1 || src.size() == 1) {
        std::fill(out.begin(), out.end(), src.front());
        if (count > 1) out.back() = src.back();
    } else {
        // Endpoint-aligned grid: output j sits at source position j * (L-1)/(M-1).
        const double scale = static_cast<double>(src.size() - 1) / static_cast<double>(count - 1);
        for (std::size_t j = 0; j < count; ++j) {
            const double pos = j * scale;
            auto left = static_cast<std::size_t>(pos);
            if (left >= src.size() - 1) left = src.size() - 2;
            const double frac = pos - static_cast<double>(left);
            out[j] = src[left] + (src[left + 1] - src[left]) * frac;
        }
        out.front() = src.front();
        out.back() = src.back();
    }
    return CurrentTrace(std::move(out), fs_new, trace.label(), trace.meta());
}

void write_dataset(const TraceSet& set, const std::filesystem::path& dir) {
    set.validate();
    namespace fs = std::filesystem;
    fs::create_directories(dir / "traces");
    std::string manifest = "path,label,device,channel,fs_hz,soc_start\n";
    for (std::size_t i = 0; i < set.traces.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "trace_%05zu.csv", i);
        const auto& t = set.traces[i];
        write_trace(t, dir / "traces" / name);
        manifest += std::string("traces/") + name + ',' +
                    (t.label() ? std::to_string(*t.label()) : "unlabeled") + ',' +
                    t.meta().device_profile + ',' + to_string(t.meta().channel) + ',' +
                    std::to_string(t.sampling_rate()) + ',' + format_double(t.meta().soc_start) +
                    '\n';
    }
    std::ofstream out(dir / "manifest.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.csv").string());
    out << manifest;
    std::ofstream classes(dir / "classes.txt", std::ios::binary | std::ios::trunc);
    for (const auto& c : set.class_names) classes << c << '\n';
}

TraceSet read_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.csv";
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + manifest_path.string());
    std::string line;
    std::getline(in, line);
    if (trim(line) != "path,label,device,channel,fs_hz,soc_start")
        throw ParseError(manifest_path.string(), 1, "unexpected manifest header");

    TraceSet set;
    std::size_t line_no = 1;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 6) throw ParseError(manifest_path.string(), line_no, "expected 6 columns");
        auto trace = read_trace(dir / fields[0]);
        const std::string label = trace.label() ? std::to_string(*trace.label()) : "unlabeled";
        if (label != fields[1] || trace.meta().device_profile != fields[2] ||
            to_string(trace.meta().channel) != fields[3] ||
            std::to_string(trace.sampling_rate()) != fields[4])
            throw ParseError(manifest_path.string(), line_no,
                             "manifest row disagrees with " + fields[0]);
        if (trace.label()) max_label = std::max(max_label, *trace.label());
        set.traces.push_back(std::move(trace));
    }

    std::ifstream classes(dir / "classes.txt");
    while (classes && std::getline(classes, line))
        if (!trim(line).empty()) set.class_names.push_back(trim(line));
    if (set.class_names.empty())
        for (int c = 0; c <= max_label; ++c) set.class_names.push_back("site" + std::to_string(c));
    set.validate();
    return set;
}

}  // namespace chargescope
