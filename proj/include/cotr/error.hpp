// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cotr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or configuration files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Backward called without a matching forward.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed .vten payloads.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Semantically invalid data, e.g. a target that is not one-hot.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace cotr
