#ifndef HIERPROBE_TOOLS_CONFIG_HPP
#define HIERPROBE_TOOLS_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hierprobe/errors.hpp"

namespace hierprobe::cli {

// Flat key=value configuration: defaults, then config file, then command-line
// flags, last writer wins. The fully resolved map is echoed into the run
// directory so any run can be replayed from its echo alone.
class Config {
public:
    void set_default(const std::string& key, const std::string& value);
    void set(const std::string& key, const std::string& value); // explicit
    bool is_explicit(const std::string& key) const { return explicit_.count(key) > 0; }
    bool has(const std::string& key) const;

    std::string get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const; // comma separated

    void load_file(const std::filesystem::path& path);
    void parse_args(const std::vector<std::string>& args);

    std::string echo_text() const; // sorted key=value lines
    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> explicit_;
};

} // namespace hierprobe::cli

#endif
