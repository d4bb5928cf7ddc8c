#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace mmseq {

/// Flat key = value run configuration. Lines starting with '#' are
/// comments; keys are single tokens; values run to end of line.
class RunConfig {
public:
    static RunConfig parse_file(const std::filesystem::path& path);
    static RunConfig parse_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;

    void set(const std::string& key, const std::string& value);
    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace mmseq
