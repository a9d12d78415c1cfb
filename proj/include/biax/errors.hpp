#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace biax {

/// Tensor shapes that do not line up for an op.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// An attention mask leaves a query row with no visible key.
class MaskError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EpisodeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Collects non-fatal conditions (skipped passes, dropped columns, ...).
/// Passed by pointer; a null sink discards warnings.
struct WarningLog {
    std::vector<std::string> messages;

    void add(std::string msg) { messages.push_back(std::move(msg)); }
    bool empty() const { return messages.empty(); }
};

inline void warn(WarningLog* log, std::string msg) {
    if (log != nullptr) log->add(std::move(msg));
}

}  // namespace biax
