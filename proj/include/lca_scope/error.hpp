// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lca_scope {

/// Base of every error raised by the library. The CLI maps subclasses to
/// exit codes (usage 1, data/format 2, numeric 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Shapes or lengths that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input that is well-formed but carries no information (all-pad batch,
/// zero-total ratios, empty dataset).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values surfaced during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace lca_scope
