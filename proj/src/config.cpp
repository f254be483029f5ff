#include "chargescope/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace chargescope {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string where(const std::string& origin, const std::string& section, const std::string& key) {
    return origin + ": " + (section.empty() ? key : section + "." + key);
}

double to_double(const std::string& text, const std::string& context) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size())
        throw std::invalid_argument(context + ": expected a number, got '" + text + "'");
    return value;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
    KeyValueConfig cfg;
    cfg.origin_ = origin;
    std::stringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line.erase(comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            cfg.values_[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": expected key = value");
        const auto key = trim(line.substr(0, eq));
        if (key.empty())
            throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": empty key");
        auto& slot = cfg.values_[section];
        if (slot.contains(key))
            throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
        slot[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str(), path.string());
}

bool KeyValueConfig::has(const std::string& section, const std::string& key) const {
    const auto it = values_.find(section);
    return it != values_.end() && it->second.contains(key);
}

std::optional<std::string> KeyValueConfig::get(const std::string& section,
                                               const std::string& key) const {
    const auto it = values_.find(section);
    if (it == values_.end()) return std::nullopt;
    const auto kv = it->second.find(key);
    if (kv == it->second.end()) return std::nullopt;
    return kv->second;
}

std::vector<std::string> KeyValueConfig::sections() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : values_) out.push_back(name);
    return out;
}

std::vector<std::string> KeyValueConfig::keys(const std::string& section) const {
    std::vector<std::string> out;
    const auto it = values_.find(section);
    if (it != values_.end())
        for (const auto& [key, _] : it->second) out.push_back(key);
    return out;
}

std::optional<std::string> KeyValueConfig::get_string(const std::string& section,
                                                      const std::string& key) const {
    auto value = get(section, key);
    if (value) consumed_.insert({section, key});
    return value;
}

std::optional<double> KeyValueConfig::get_double(const std::string& section,
                                                 const std::string& key) const {
    const auto text = get_string(section, key);
    if (!text) return std::nullopt;
    return to_double(*text, where(origin_, section, key));
}

std::optional<long long> KeyValueConfig::get_int(const std::string& section,
                                                 const std::string& key) const {
    const auto text = get_string(section, key);
    if (!text) return std::nullopt;
    long long value = 0;
    auto [ptr, ec] = std::from_chars(text->data(), text->data() + text->size(), value);
    if (ec != std::errc() || ptr != text->data() + text->size())
        throw std::invalid_argument(where(origin_, section, key) + ": expected an integer, got '" + *text + "'");
    return value;
}

std::optional<std::uint64_t> KeyValueConfig::get_u64(const std::string& section,
                                                     const std::string& key) const {
    const auto text = get_string(section, key);
    if (!text) return std::nullopt;
    std::uint64_t value = 0;
    auto [ptr, ec] = std::from_chars(text->data(), text->data() + text->size(), value);
    if (ec != std::errc() || ptr != text->data() + text->size())
        throw std::invalid_argument(where(origin_, section, key) + ": expected an unsigned integer, got '" + *text + "'");
    return value;
}

std::optional<bool> KeyValueConfig::get_bool(const std::string& section,
                                             const std::string& key) const {
    const auto text = get_string(section, key);
    if (!text) return std::nullopt;
    if (*text == "true" || *text == "1" || *text == "yes") return true;
    if (*text == "false" || *text == "0" || *text == "no") return false;
    throw std::invalid_argument(where(origin_, section, key) + ": expected true/false, got '" + *text + "'");
}

std::optional<std::vector<double>> KeyValueConfig::get_doubles(const std::string& section,
                                                               const std::string& key) const {
    const auto text = get_string(section, key);
    if (!text) return std::nullopt;
    std::vector<double> out;
    for (const auto& item : split_list(*text)) out.push_back(to_double(item, where(origin_, section, key)));
    return out;
}

std::optional<std::vector<std::string>> KeyValueConfig::get_strings(const std::string& section,
                                                                    const std::string& key) const {
    const auto text = get_string(section, key);
    if (!text) return std::nullopt;
    return split_list(*text);
}

std::vector<std::string> KeyValueConfig::unconsumed() const {
    std::vector<std::string> out;
    for (const auto& [section, entries] : values_)
        for (const auto& [key, _] : entries)
            if (!consumed_.contains({section, key}))
                out.push_back(section.empty() ? key : section + "." + key);
    return out;
}

}  // namespace chargescope
