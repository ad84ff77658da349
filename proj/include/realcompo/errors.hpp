#pragma once

#include <stdexcept>
#include <string>

namespace realcompo {

// Base of every error raised by the library. `module` names the component
// that detected the problem so the CLI can print a single structured line.
class Error : public std::runtime_error {
public:
    Error(std::string module, const std::string& message)
        : std::runtime_error(message), module_(std::move(module)) {}

    const std::string& module() const noexcept { return module_; }

private:
    std::string module_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Unparseable external text (e.g. an LLM reply); keeps the offending input.
class ParseError : public Error {
public:
    ParseError(std::string module, const std::string& message, std::string raw)
        : Error(std::move(module), message), raw_(std::move(raw)) {}

    const std::string& raw() const noexcept { return raw_; }

private:
    std::string raw_;
};

class NetworkError : public Error {
public:
    using Error::Error;
};

}  // namespace realcompo
