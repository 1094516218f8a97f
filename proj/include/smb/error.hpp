#pragma once

#include <stdexcept>
#include <string>

namespace smb {

// Bad input data: malformed files, unknown tokens, degenerate labels.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf or other numerical breakdown.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration or command-line usage.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace smb
