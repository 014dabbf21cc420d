#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cfood {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A caller violated an operation's documented precondition.
class PreconditionError : public Error {
public:
  using Error::Error;
};

/// Malformed input file. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// A server response failed schema validation.
class ProtocolError : public Error {
public:
  using Error::Error;
};

/// Connection-level failure; retried by the client.
class TransportError : public Error {
public:
  using Error::Error;
};

class TimeoutError : public TransportError {
public:
  using TransportError::TransportError;
};

/// The server answered with a non-2xx status.
class ServerError : public Error {
public:
  ServerError(int status, const std::string& what)
      : Error("server error " + std::to_string(status) + ": " + what), status_(status) {}
  int status() const noexcept { return status_; }

private:
  int status_;
};

}  // namespace cfood
