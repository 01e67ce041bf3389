#pragma once

#include <stdexcept>
#include <string>

namespace hytune {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments, configs, or input files. The CLI maps these to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A malformed line in a JSON-lines or config file.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : ValidationError(source + ":" + std::to_string(line) + ": " + what),
        source_(source),
        line_(line) {}

  const std::string& source() const noexcept { return source_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string source_;
  std::size_t line_;
};

}  // namespace hytune
