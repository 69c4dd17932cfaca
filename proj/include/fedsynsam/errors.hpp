// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedsyn {

/// Precondition or shape contract broken by the caller.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite value produced during a computation.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, std::ptrdiff_t where = -1)
        : std::runtime_error(where >= 0 ? what + " (at index " + std::to_string(where) + ")" : what),
          where_(where) {}

    /// Tape node, inner step or coordinate that produced the value; -1 if unknown.
    std::ptrdiff_t where() const noexcept { return where_; }

private:
    std::ptrdiff_t where_;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace fedsyn
