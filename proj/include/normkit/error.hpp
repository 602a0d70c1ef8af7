#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace normkit {

// Malformed NKT1 files, bad checkpoints, unparseable label files.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem-level failures: missing files, unwritable paths.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// API misuse that config validation cannot catch: backward before
// forward, a parameter without a gradient slot.
class StateError : public std::logic_error {
 public:
  explicit StateError(const std::string& what) : std::logic_error(what) {}
};

// Rejected run configuration (unknown key, cross-field violation).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Training aborted on a non-finite or exploding loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, double lr, const std::string& what)
      : std::runtime_error(what), step(step), lr(lr) {}
  std::size_t step;
  double lr;
};

}  // namespace normkit
