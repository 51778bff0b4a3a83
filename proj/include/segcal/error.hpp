#pragma once

#include <stdexcept>
#include <string>

namespace segcal {

// Base of every error thrown by the library. The CLI maps subclasses onto
// exit codes, so new error kinds should derive from one of these.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

// A scalar or array value outside its admissible domain (probability not in
// [0,1], non-finite logit, non-positive temperature).
class InputDomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "input-domain"; }
};

// Shapes, class counts or bin counts that do not line up.
class StructuralError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "structural"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

class ParseError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "parse"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch)
      : Error(what), epoch_(epoch) {}
  const char* kind() const noexcept override { return "training"; }
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace segcal
