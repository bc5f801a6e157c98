#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cflat {

// Root of every exception the library throws. The C API maps each subclass
// onto a distinct status code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    DimensionError(const std::string& what, std::size_t expected, std::size_t actual)
        : Error(what + ": expected dimension " + std::to_string(expected) + ", got " +
                std::to_string(actual)),
          expected_(expected), actual_(actual) {}

    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_;
    std::size_t actual_;
};

// Non-finite loss or gradient. `step` is -1 until the training loop attaches
// the offending step index.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& what, long step = -1)
        : Error(step < 0 ? what : what + " (step " + std::to_string(step) + ")"),
          detail_(what), step_(step) {}

    long step() const noexcept { return step_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    std::string detail_;
    long step_;
};

// Config validation failure. `field` is the dotted path of the offending key.
class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& what)
        : Error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace cflat
