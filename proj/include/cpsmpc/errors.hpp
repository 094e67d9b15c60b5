#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cpsmpc {

// Error taxonomy mirrored by the CLI exit codes: config=2, data=3,
// calibration=4, initial infeasibility=5.

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class DataError : public std::runtime_error {
public:
    enum class Kind { parse, dimension, ragged, io };

    DataError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

class CalibrationError : public std::runtime_error {
public:
    explicit CalibrationError(const std::string& what, long minimal_samples = -1)
        : std::runtime_error(what), minimal_samples_(minimal_samples) {}

    // minimal M that would make the request feasible, -1 if not applicable
    long minimal_samples() const { return minimal_samples_; }

private:
    long minimal_samples_;
};

class InitialInfeasibleError : public std::runtime_error {
public:
    InitialInfeasibleError(const std::string& what,
                           std::vector<std::string> violated_sets)
        : std::runtime_error(what), violated_sets_(std::move(violated_sets)) {}

    const std::vector<std::string>& violated_sets() const { return violated_sets_; }

private:
    std::vector<std::string> violated_sets_;
};

// Raised when the QP turns infeasible at t > 0, which recursive feasibility
// rules out; signals an internal bug, not a user error.
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

}  // namespace cpsmpc
