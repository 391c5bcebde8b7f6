#pragma once

#include <stdexcept>
#include <string>

namespace opro {

// Every failure raised by the library derives from Error; the CLI maps the
// concrete class to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class ParameterError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

class IndexError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 6; }
};

class InvariantError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 7; }
};

class FileError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 8; }
};

}  // namespace opro
