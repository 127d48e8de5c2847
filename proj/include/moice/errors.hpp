#pragma once

#include <stdexcept>
#include <string>

namespace moice {

// Error taxonomy used across the library. The CLI maps ConfigError to exit
// code 2 and everything else to exit code 1.

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

class IndexError : public std::runtime_error {
public:
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

class StateError : public std::runtime_error {
public:
    explicit StateError(const std::string& msg) : std::runtime_error("state error: " + msg) {}
};

class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error("input error: " + msg) {}
};

} // namespace moice
