#pragma once

#include <stdexcept>
#include <string>

namespace clvs {

// Error taxonomy shared across the library. Every throw site uses one of
// these so callers (and the CLI exit-code mapping) can tell configuration
// mistakes apart from bad inputs, corrupted files, and broken invariants.

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid model/session configuration (bad dimensions, bad hyperparameters).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// Well-formed configuration, invalid runtime input (length mismatch, bad token id).
class InputError : public Error {
public:
    explicit InputError(const std::string& msg) : Error("input error: " + msg) {}
};

// Hook/session call sequence violated (e.g. layers visited out of order).
class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& msg) : Error("protocol error: " + msg) {}
};

// A file could not be decoded. Carries a 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, long line = 0)
        : Error(line > 0 ? "parse error at line " + std::to_string(line) + ": " + msg
                         : "parse error: " + msg),
          line_(line) {}
    long line() const { return line_; }

private:
    long line_;
};

// Decoded data violates a documented invariant.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error("validation error: " + msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("i/o error: " + msg) {}
};

// A statistic is undefined on the given sample (single class, zero variance,
// perfect separation).
class StatError : public Error {
public:
    explicit StatError(const std::string& msg) : Error("statistic undefined: " + msg) {}
};

// Engine/oracle disagreement beyond tolerance in verify mode.
class VerifyError : public Error {
public:
    explicit VerifyError(const std::string& msg) : Error("verification failed: " + msg) {}
};

} // namespace clvs
