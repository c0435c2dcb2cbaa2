#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace convsink {

// Malformed input or a violated precondition. The CLI maps these to exit code 2.
// `code` is a stable machine-checkable name ("EouInPayload", "OutOfOrder", ...).
class ValidationError : public std::runtime_error {
public:
    ValidationError(std::string code, const std::string& detail)
        : std::runtime_error(code + ": " + detail), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

// Failure after inputs were accepted (I/O, numeric divergence). Exit code 3.
class RuntimeFailure : public std::runtime_error {
public:
    RuntimeFailure(std::string code, const std::string& detail)
        : std::runtime_error(code + ": " + detail), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

}  // namespace convsink
