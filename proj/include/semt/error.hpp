// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace semt {

/// Base of every error thrown by the library. `kind()` is a short
/// machine-readable tag ("shape", "numeric", "config", ...) used by the CLI
/// to print a single-line error prefix.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class CheckpointError : public Error {
public:
    CheckpointError(std::string kind, const std::string& m) : Error(std::move(kind), m) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& m) : Error("data", m) {}
};

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& m) : Error("training", m) {}
};

} // namespace semt
