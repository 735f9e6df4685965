#pragma once

#include <stdexcept>
#include <string>

namespace nattn {

/// Shape disagreement between operands (matmul, bias vs keys, grids).
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

/// Data that violates an operation's preconditions (NaN entries, ragged CSV,
/// out-of-range indices).
struct InvalidInputError : std::runtime_error {
    explicit InvalidInputError(const std::string& what) : std::runtime_error(what) {}
};

/// A scalar parameter outside its documented domain (non-positive scale,
/// rank beyond the spectrum length).
struct InvalidParameterError : std::runtime_error {
    explicit InvalidParameterError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed configuration: unknown strategy, overlapping token spans,
/// tau outside (0,1].
struct ConfigurationError : std::runtime_error {
    explicit ConfigurationError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem failure, annotated with the offending path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace nattn
