#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace slm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad input data: malformed files, invalid matrices, mismatched lengths.
class DataError : public Error {
public:
    using Error::Error;
};

class ParseError : public DataError {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

// Non-finite losses, zero-probability events, non-convergent iterations.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace slm
