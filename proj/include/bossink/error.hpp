#pragma once

#include <stdexcept>
#include <string>

namespace bossink {

// Base of every error raised by the library. Subclasses name the failure
// category so callers (the CLI in particular) can report a single line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class PolicyError : public Error {
 public:
  using Error::Error;
};

class UndefinedScoreError : public Error {
 public:
  using Error::Error;
};

class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class MalformedManifestError : public IoError {
 public:
  using IoError::IoError;
};

class IncompleteCheckpointError : public IoError {
 public:
  using IoError::IoError;
};

class CorruptWeightsError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace bossink
