#pragma once

#include <stdexcept>
#include <string>

namespace psvit {

// Exit-code mapping at the CLI: usage 2, data 3, numeric 4.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& m) : std::runtime_error(m) {}
};
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace psvit
