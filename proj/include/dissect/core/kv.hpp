#pragma once

#include "dissect/core/error.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

namespace dissect {

inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, std::string_view text) {
    double v = 0;
    const std::string t = trim(text);
    auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size())
        throw ConfigError("key '" + key + "': expected a number, got '" + t + "'");
    return v;
}

inline long long parse_int(const std::string& key, std::string_view text) {
    long long v = 0;
    const std::string t = trim(text);
    auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + t + "'");
    return v;
}

inline std::uint64_t parse_u64(const std::string& key, std::string_view text) {
    std::uint64_t v = 0;
    const std::string t = trim(text);
    auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size())
        throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + t + "'");
    return v;
}

inline bool parse_bool(const std::string& key, std::string_view text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "on") return true;
    if (t == "false" || t == "0" || t == "off") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + t + "'");
}

// Ordered list of key=value pairs. '#' starts a comment line; blank lines are
// skipped; duplicate keys are an error.
class KeyValues {
public:
    static KeyValues parse(std::istream& in, const std::string& origin = "<input>") {
        KeyValues kv;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
            std::string key = trim(std::string_view(t).substr(0, eq));
            std::string value = trim(std::string_view(t).substr(eq + 1));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            if (kv.has(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            kv.set(std::move(key), std::move(value));
        }
        return kv;
    }

    static KeyValues parse_string(const std::string& text, const std::string& origin = "<string>") {
        std::istringstream in(text);
        return parse(in, origin);
    }

    static KeyValues load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open '" + path + "'");
        return parse(in, path);
    }

    bool has(const std::string& key) const { return index_.count(key) != 0; }

    const std::string& get(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError("missing key '" + key + "'");
        return entries_[it->second].second;
    }

    void set(std::string key, std::string value) {
        auto it = index_.find(key);
        if (it != index_.end()) {
            entries_[it->second].second = std::move(value);
            return;
        }
        index_.emplace(key, entries_.size());
        entries_.emplace_back(std::move(key), std::move(value));
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::string to_string() const {
        std::string out;
        for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
        return out;
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace dissect
