// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cbn {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents (matmul inner dimension, broadcast, layer sizes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Convolution geometry that cannot produce an output.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range index (class target, token id, attribute value).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Mathematically empty or degenerate input (empty reduction, single-element batch).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Object used before it was initialized.
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or dataset artifact does not match what the reader expects.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbn
