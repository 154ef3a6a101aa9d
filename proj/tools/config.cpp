#include "config.hpp"

#include <fstream>
#include <sstream>

namespace hierprobe::cli {

void Config::set_default(const std::string& key, const std::string& value) {
    if (!values_.count(key)) values_[key] = value;
}

void Config::set(const std::string& key, const std::string& value) {
    values_[key] = value;
    explicit_.insert(key);
}

bool Config::has(const std::string& key) const {
    auto it = values_.find(key);
    return it != values_.end() && !it->second.empty();
}

std::string Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end() || it->second.empty())
        throw UsageError("missing required option --" + key);
    return it->second;
}

std::string Config::get_or(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() || it->second.empty() ? fallback : it->second;
}

long Config::get_int(const std::string& key) const {
    try {
        return std::stol(get(key));
    } catch (const std::exception&) {
        throw UsageError("option --" + key + " needs an integer, got '" + get(key) + "'");
    }
}

double Config::get_double(const std::string& key) const {
    try {
        return std::stod(get(key));
    } catch (const std::exception&) {
        throw UsageError("option --" + key + " needs a number, got '" + get(key) + "'");
    }
}

bool Config::get_bool(const std::string& key) const {
    const std::string v = get(key);
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw UsageError("option --" + key + " needs a boolean, got '" + v + "'");
}

std::uint64_t Config::get_u64(const std::string& key) const {
    try {
        return std::stoull(get(key));
    } catch (const std::exception&) {
        throw UsageError("option --" + key + " needs an unsigned integer, got '" + get(key) + "'");
    }
}

std::vector<int> Config::get_int_list(const std::string& key) const {
    std::vector<int> out;
    const std::string v = get_or(key, "");
    if (v.empty() || v == "none") return out;
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw UsageError("option --" + key + " needs comma-separated integers, got '" + v + "'");
        }
    }
    return out;
}

void Config::load_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file " + path.string());
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path.string() + ":" + std::to_string(line_no) +
                             ": expected key=value");
        set(line.substr(0, eq), line.substr(eq + 1));
    }
}

void Config::parse_args(const std::vector<std::string>& args) {
    // --config FILE is applied in place so later flags override file entries
    for (std::size_t i = 0; i < args.size(); ++i) {
        std::string a = args[i];
        if (a.rfind("--", 0) != 0)
            throw UsageError("unexpected argument '" + a + "' (options are --key value)");
        a = a.substr(2);
        std::string value;
        if (const auto eq = a.find('='); eq != std::string::npos) {
            value = a.substr(eq + 1);
            a = a.substr(0, eq);
        } else {
            if (i + 1 >= args.size())
                throw UsageError("option --" + a + " needs a value");
            value = args[++i];
        }
        if (a == "config")
            load_file(value);
        else
            set(a, value);
    }
}

std::string Config::echo_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

} // namespace hierprobe::cli
