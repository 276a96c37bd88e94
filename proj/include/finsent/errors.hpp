// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace finsent {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument. Detected before any compute starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or malformed input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A prompt that cannot fit BOS + prompt + EOS + answer into max_seq_len.
class ExampleTooLong : public DataError {
 public:
  using DataError::DataError;
};

/// Tensor or sequence dimensions that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Loss or gradient became non-finite during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Generated text contained no standalone A/B/C.
class NoAnswerFound : public Error {
 public:
  using Error::Error;
};

/// Another command holds the output directory.
class OutputLocked : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Evaluation accuracy below the requested minimum.
class AccuracyGateFailed : public Error {
 public:
  using Error::Error;
};

}  // namespace finsent
