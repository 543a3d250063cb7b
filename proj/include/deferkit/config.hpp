#pragma once

// Flat key-value config files with [section] headers. Keys are addressed
// as "section.key"; CLI flags override file values.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "deferkit/common.hpp"

namespace deferkit {

class Config {
  public:
    Config() = default;

    static Config from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ParseError("cannot open config: " + path);
        Config cfg;
        std::string line, section;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            auto first = line.find_first_not_of(" \t");
            if (first == std::string::npos) continue;
            if (line[first] == '#' || line[first] == ';') continue;
            if (line[first] == '[') {
                auto close = line.find(']', first);
                if (close == std::string::npos)
                    throw ParseError("config line " + std::to_string(line_no) + ": unclosed section");
                section = line.substr(first + 1, close - first - 1);
                continue;
            }
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ParseError("config line " + std::to_string(line_no) + ": expected key=value");
            std::string key = trim(line.substr(0, eq));
            std::string val = trim(line.substr(eq + 1));
            cfg.values_[section.empty() ? key : section + "." + key] = val;
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }
    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stoi(it->second);
    }
    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stod(it->second);
    }
    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return it->second == "true" || it->second == "1" || it->second == "yes";
    }
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<int> out;
        std::stringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(std::stoi(trim(tok)));
        return out;
    }
    std::vector<std::string> get_list(const std::string& key,
                                      const std::vector<std::string>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<std::string> out;
        std::stringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(trim(tok));
        return out;
    }

    /// Stable digest of all key=value pairs; embedded in every output
    /// artifact so a stored run is reconstructable.
    std::string fingerprint() const {
        std::string all;
        for (const auto& [k, v] : values_) all += k + "=" + v + "\n";
        std::ostringstream os;
        os << std::hex << fnv1a64(all);
        return os.str();
    }

    std::string dump() const {
        std::string all;
        for (const auto& [k, v] : values_) all += k + "=" + v + "\n";
        return all;
    }

  private:
    static std::string trim(const std::string& s) {
        auto a = s.find_first_not_of(" \t\r");
        auto b = s.find_last_not_of(" \t\r");
        if (a == std::string::npos) return "";
        return s.substr(a, b - a + 1);
    }
    std::map<std::string, std::string> values_;
};

}  // namespace deferkit
