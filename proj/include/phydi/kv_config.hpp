#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace phydi {

/// Flat key/value configuration with dotted keys.
///
///     # comment
///     model.depth = 18
///     [train]
///     epochs = 10        # becomes train.epochs
///
/// Typed getters raise ConfigError naming the offending key.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text, std::string_view source = "<string>");
    static KeyValueConfig load(const std::filesystem::path& path);

    void set(const std::string& key, std::string value);
    /// Applies a `key=value` override.
    void apply_override(std::string_view assignment);
    void merge(const KeyValueConfig& other);

    bool contains(const std::string& key) const { return values_.contains(key); }
    std::optional<std::string> get(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::uint64_t> get_uint_list(const std::string& key,
                                             const std::vector<std::uint64_t>& fallback) const;
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const;
    std::vector<std::string> get_string_list(const std::string& key,
                                             const std::vector<std::string>& fallback) const;

    /// Keys starting with `prefix.`, with the prefix removed.
    KeyValueConfig section(const std::string& prefix) const;

    /// Canonical text: one `key = value` line per entry, sorted by key.
    std::string to_text() const;
    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

std::string join_list(const std::vector<std::uint64_t>& values);
std::string format_double(double value);

}  // namespace phydi
