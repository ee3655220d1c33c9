#pragma once

#include <stdexcept>
#include <string>

namespace cfusion {

// Exit codes of the command-line tool map one-to-one onto these.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitNumerical = 3;

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint/dataset format problems. Kept distinct so callers can tell a
// bad magic from a version skew from a corrupted payload.
class FormatError : public IoError {
 public:
  enum class Kind { kMagic, kVersion, kCorrupt, kHashMismatch, kStrategyMismatch };
  FormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cfusion
