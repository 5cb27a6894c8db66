// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration: a defaults table, optional file and
// command-line overrides, typed getters, and a deterministic resolved dump.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "duogen/errors.hpp"

namespace duogen {

struct RunConfig {
    std::map<std::string, std::string> values;

    bool has(const std::string& key) const { return values.count(key) != 0; }

    const std::string& get_str(const std::string& key) const {
        auto it = values.find(key);
        if (it == values.end()) throw ConfigError("config key '" + key + "' is not set");
        return it->second;
    }

    int64_t get_int(const std::string& key) const {
        const auto& s = get_str(key);
        size_t used = 0;
        int64_t v = 0;
        try {
            v = std::stoll(s, &used);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' = '" + s + "' is not an integer");
        }
        if (used != s.size()) throw ConfigError("config key '" + key + "' = '" + s + "' is not an integer");
        return v;
    }

    double get_double(const std::string& key) const {
        const auto& s = get_str(key);
        size_t used = 0;
        double v = 0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' = '" + s + "' is not a number");
        }
        if (used != s.size()) throw ConfigError("config key '" + key + "' = '" + s + "' is not a number");
        return v;
    }

    bool get_bool(const std::string& key) const {
        const auto& s = get_str(key);
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw ConfigError("config key '" + key + "' = '" + s + "' is not a boolean (true/false/1/0)");
    }

    uint64_t get_seed(const std::string& key) const {
        int64_t v = get_int(key);
        if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative, got " + std::to_string(v));
        return uint64_t(v);
    }

    void set(const std::string& key, const std::string& value) { values[key] = value; }

    // Alphabetical key=value lines, one per key: the canonical resolved form
    // logged by every run.
    std::string resolved() const {
        std::string out;
        for (const auto& [k, v] : values) out += k + "=" + v + "\n";
        return out;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

// key=value per line; blank lines and '#' comments are skipped.
inline void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ParseError("config file '" + path + "' line " + std::to_string(lineno) +
                                 ": expected key=value, got '" + t + "'",
                             lineno);
        cfg.set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    }
}

inline RunConfig make_config(const std::map<std::string, std::string>& defaults) {
    RunConfig cfg;
    cfg.values = defaults;
    return cfg;
}

}  // namespace duogen
