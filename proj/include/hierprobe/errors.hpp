#ifndef HIERPROBE_ERRORS_HPP
#define HIERPROBE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace hierprobe {

// Shapes or dimensions do not compose.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// A stated precondition or API contract was violated by the caller.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, divergence, degenerate numerics.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk format problems: bad magic, truncation, schema mismatch.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Command-line / config problems. Maps to exit code 1 in the CLI.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace hierprobe

#endif
