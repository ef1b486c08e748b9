#pragma once

#include <stdexcept>
#include <string>

namespace zssrt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or precondition on a parameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Input data failed an invariant check (e.g. non-rigid camera pose).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Value outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage is missing an artifact produced by an earlier stage.
class MissingDependencyError : public Error {
 public:
  MissingDependencyError(const std::string& what, std::string path)
      : Error(what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

}  // namespace zssrt
