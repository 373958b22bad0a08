#pragma once

#include <stdexcept>
#include <string>

namespace regionmir {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Vector too close to zero to normalize or compare.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument value (negative temperature, label out of range, empty split...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class EmptyPositiveError : public Error {
 public:
  using Error::Error;
};

class UnsupportedClassCountError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Pseudo label (or given label) has no K-means model in the index.
class UnknownAnatomyError : public Error {
 public:
  UnknownAnatomyError(int label, const std::string& what)
      : Error(what), label_(label) {}
  int label() const noexcept { return label_; }

 private:
  int label_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Dataset loading failures, one kind per distinct cause.
class LoadError : public IoError {
 public:
  enum class Kind {
    kMissingFile,
    kMalformedManifest,
    kMalformedPgm,
    kOutOfBoundsBox,
    kDuplicateLabel,
    kLabelOutOfRange,
  };

  LoadError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Binary file with a wrong magic, truncated payload or inconsistent header.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace regionmir
