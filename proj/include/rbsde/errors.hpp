#pragma once

#include <stdexcept>
#include <string>

namespace rbsde {

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A declared standing assumption does not hold (e.g. beta <= beta_bar).
struct AssumptionViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An intensity control produced a rate outside (0, n].
struct ConstraintViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Too many divergent paths, or a non-monotone discretization.
struct NumericalFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what)
{
    if (!cond) throw InvalidArgument(what);
}

} // namespace rbsde
