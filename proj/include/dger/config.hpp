#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dger/common.hpp"

namespace dger {

// ===========================================================================
// Flat key-value configuration: one "section.key = value" per line, '#'
// comments, CLI overrides via "key=value" strings.  An override without a
// section prefix resolves against the stored keys when the suffix is
// unambiguous ("rl_on" -> "train.rl_on").
// ===========================================================================

class Config {
public:
    static std::string trim(const std::string& s) {
        std::size_t b = 0, e = s.size();
        while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
        return s.substr(b, e - b);
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) > 0; }
    const std::map<std::string, std::string>& values() const { return values_; }

    void parse_line(const std::string& line, int lineno = 0) {
        const std::string stripped = trim(line.substr(0, line.find('#')));
        if (stripped.empty()) return;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            fail(strfmt("config line %d: expected 'key = value', got '%s'", lineno, stripped.c_str()));
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (key.empty()) fail(strfmt("config line %d: empty key", lineno));
        set(key, value);
    }

    static Config from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) fail(strfmt("config: cannot open '%s'", path.c_str()));
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) cfg.parse_line(line, ++lineno);
        return cfg;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) fail(strfmt("config: cannot open '%s' for writing", path.c_str()));
        for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
        if (!os) fail(strfmt("config: write to '%s' failed", path.c_str()));
    }

    // Apply a "key=value" override; a key without a '.' resolves against the
    // known keys by unique ".key" suffix.
    void apply_override(const std::string& kv, const std::vector<std::string>& known_keys) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) fail(strfmt("override '%s': expected key=value", kv.c_str()));
        std::string key = trim(kv.substr(0, eq));
        const std::string value = trim(kv.substr(eq + 1));
        if (key.empty()) fail(strfmt("override '%s': empty key", kv.c_str()));
        if (key.find('.') == std::string::npos) {
            std::vector<std::string> matches;
            for (const auto& k : known_keys)
                if (k.size() > key.size() && k.compare(k.size() - key.size(), key.size(), key) == 0 &&
                    k[k.size() - key.size() - 1] == '.')
                    matches.push_back(k);
            if (matches.empty()) fail(strfmt("override: no known key matches '%s'", key.c_str()));
            if (matches.size() > 1)
                fail(strfmt("override: '%s' is ambiguous (%s, %s, ...)", key.c_str(),
                            matches[0].c_str(), matches[1].c_str()));
            key = matches[0];
        }
        set(key, value);
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            fail(strfmt("config: '%s = %s' is not a number", key.c_str(), it->second.c_str()));
        }
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long v = std::stol(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return static_cast<int>(v);
        } catch (const std::exception&) {
            fail(strfmt("config: '%s = %s' is not an integer", key.c_str(), it->second.c_str()));
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        fail(strfmt("config: '%s = %s' is not a boolean", key.c_str(), v.c_str()));
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace dger
