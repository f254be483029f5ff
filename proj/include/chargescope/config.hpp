#pragma once

#include <filesystem>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace chargescope {

/// Plain-text `key = value` file with `[section]` headers. Keys before the
/// first header live in section "". `#` and `;` start comments.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(const std::string& section, const std::string& key) const;
    std::optional<std::string> get(const std::string& section, const std::string& key) const;
    std::vector<std::string> sections() const;
    std::vector<std::string> keys(const std::string& section) const;

    /// Typed accessors mark the key as consumed; they throw on malformed values.
    std::optional<double> get_double(const std::string& section, const std::string& key) const;
    std::optional<long long> get_int(const std::string& section, const std::string& key) const;
    std::optional<std::uint64_t> get_u64(const std::string& section, const std::string& key) const;
    std::optional<bool> get_bool(const std::string& section, const std::string& key) const;
    std::optional<std::string> get_string(const std::string& section, const std::string& key) const;
    std::optional<std::vector<double>> get_doubles(const std::string& section,
                                                   const std::string& key) const;
    std::optional<std::vector<std::string>> get_strings(const std::string& section,
                                                        const std::string& key) const;

    /// "section.key" for every entry never read through an accessor.
    std::vector<std::string> unconsumed() const;
    const std::string& origin() const { return origin_; }

private:
    std::string origin_;
    std::map<std::string, std::map<std::string, std::string>> values_;
    mutable std::set<std::pair<std::string, std::string>> consumed_;
};

}  // namespace chargescope
