#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fablelm {

using TokenId = std::uint32_t;

/// Base for every error raised by the library. Callers that only care about
/// "did it work" catch this; the subclasses exist for tests and the CLI,
/// which maps them onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data: bad UTF-8, bad JSON, bad binary headers.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in a loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fablelm
