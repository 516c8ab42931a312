#pragma once

#include <stdexcept>
#include <string>

namespace binet {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension / axis mismatches. Messages name the offending axis.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent configuration (model, corpus, training, CLI).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed files: WAV headers, checkpoints, manifests, cue containers.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Mathematically invalid input (zero-power reference, log of nonpositive).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

// API misuse: non-scalar loss passed to backward, stepping past the
// configured iteration count, and similar caller-side contract breaks.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Filesystem failures (missing file, short read/write).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace binet
