#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vblora {

/// Precondition or configuration violation. The CLI maps this to exit code 1.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Bank too large for the 16-bit index encoding of the stored format.
class UnsupportedBankSize : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A stored adapter whose manifest cannot be reassembled into factors.
class InvalidAdapter : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ParseErrorKind {
    BadMagic,
    BadVersion,
    Truncated,
    CrcMismatch,
    Corrupt,
};

const char* to_string(ParseErrorKind kind) noexcept;

/// Failure to decode a `.vbla` (or footprint) byte stream.
class ParseError : public std::runtime_error {
public:
    ParseError(ParseErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ParseErrorKind kind() const noexcept { return kind_; }

private:
    ParseErrorKind kind_;
};

/// Non-finite training loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t step, double loss)
        : std::runtime_error("training diverged at step " + std::to_string(step) +
                             " (loss = " + std::to_string(loss) + ")"),
          step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

inline const char* to_string(ParseErrorKind kind) noexcept {
    switch (kind) {
    case ParseErrorKind::BadMagic: return "bad magic";
    case ParseErrorKind::BadVersion: return "unsupported version";
    case ParseErrorKind::Truncated: return "truncated stream";
    case ParseErrorKind::CrcMismatch: return "CRC mismatch";
    case ParseErrorKind::Corrupt: return "corrupt payload";
    }
    return "parse error";
}

}  // namespace vblora
