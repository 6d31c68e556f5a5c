#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace physmv {

/// Raised when tensor extents are incompatible with an operation.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

/// Raised on mathematical domain violations (log of non-positive, division by
/// zero, non-finite results).
class DomainError : public std::runtime_error {
public:
    explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

/// Raised on malformed files or unwritable paths.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

/// Raised when a simulation step fails; carries the step index.
class SimError : public std::runtime_error {
public:
    SimError(const std::string& msg, long step)
        : std::runtime_error("simulation error at step " + std::to_string(step) + ": " + msg),
          step_index(step) {}
    long step_index;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

}  // namespace physmv
