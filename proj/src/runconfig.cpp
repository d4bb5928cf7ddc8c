#include "mmseq/runconfig.hpp"

#include <fstream>
#include <sstream>

#include "mmseq/common.hpp"

namespace mmseq {

RunConfig RunConfig::parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str());
}

RunConfig RunConfig::parse_string(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw ConfigError(detail::format_msg("config line ", line_no,
                                                     ": expected key = value"));
            }
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(detail::format_msg("config line ", line_no, ": empty key"));
        }
        cfg.kv_[key] = value;
    }
    return cfg;
}

bool RunConfig::has(const std::string& key) const { return kv_.contains(key); }

std::string RunConfig::get_string(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("config: missing required key '" + key + "'");
    return it->second;
}

std::string RunConfig::get_string(const std::string& key,
                                  const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

std::int64_t RunConfig::get_int(const std::string& key, std::int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoll(it->second);
    } catch (...) {
        throw ConfigError("config: key '" + key + "' is not an integer: " + it->second);
    }
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    if (!has(key)) throw ConfigError("config: missing required key '" + key + "'");
    return get_int(key, 0);
}

double RunConfig::get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (...) {
        throw ConfigError("config: key '" + key + "' is not a number: " + it->second);
    }
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (...) {
        throw ConfigError("config: key '" + key + "' is not an integer: " + it->second);
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    kv_[key] = value;
}

}  // namespace mmseq
