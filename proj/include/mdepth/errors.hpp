#pragma once

#include <stdexcept>
#include <string>

namespace mdepth {

// Every failure surfaces as an Error with a stable machine-parsable
// category; the CLI prints "error: <category>: <message>" and exits nonzero.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

// Invalid run configuration (resolutions, divisibility, ranges).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

// API misuse: wrong call order, disallowed arguments.
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error("usage", msg) {}
};

// Tensor shape / extent mismatch.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("dimension", msg) {}
};

// Non-finite values or otherwise invalid numerics.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

// Filesystem-level failures (missing file, short read).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io", msg) {}
};

// Malformed on-disk data (bad magic, bad manifest).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

// Evaluation cannot proceed (e.g. zero valid pixels).
struct EvalError : Error {
    explicit EvalError(const std::string& msg) : Error("eval", msg) {}
};

// Gradient-check harness detected an unusable target function.
struct HarnessError : Error {
    explicit HarnessError(const std::string& msg) : Error("harness", msg) {}
};

}  // namespace mdepth
