#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace featlab {

// Plain-text configuration: one `key = value` per line, '#' starts a
// comment, keys are dotted (`sae.lr`). Later assignments win.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text, const std::string& origin = "<string>");
    static KeyValueConfig load(const std::filesystem::path& path);

    // `key=value` as given on the command line.
    void assign(std::string_view assignment);
    void set(const std::string& key, const std::string& value);
    void merge(const KeyValueConfig& other);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    long get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::string> get_list(const std::string& key) const;  // comma separated
    std::vector<int> get_int_list(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return values_; }
    // Sorted `key = value` lines; the hash is taken over this text.
    std::string canonical() const;
    std::string hash() const;

private:
    std::map<std::string, std::string> values_;
};

struct ConfigKey {
    const char* key;
    const char* default_value;
    const char* help;
};

// Every recognised key with its default.
const std::vector<ConfigKey>& config_schema();
KeyValueConfig default_config();
// Defaults overlaid with `cfg`; unknown keys are a ConfigError.
KeyValueConfig with_defaults(const KeyValueConfig& cfg);
// The schema rendered as a commented config file.
std::string schema_text();

} // namespace featlab
