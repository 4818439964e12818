#pragma once

#include <stdexcept>
#include <string>

namespace sae {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid hyperparameter or option combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A non-finite value appeared where finiteness is promised.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrorKind {
  Io,
  BadMagic,
  BadVersion,
  BadDtype,
  Truncated,
  DimMismatch,
  BadSection,
};

const char* to_string(FormatErrorKind kind);

// Malformed or unreadable on-disk file.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::Io: return "io error";
    case FormatErrorKind::BadMagic: return "bad magic";
    case FormatErrorKind::BadVersion: return "bad version";
    case FormatErrorKind::BadDtype: return "bad dtype";
    case FormatErrorKind::Truncated: return "truncated payload";
    case FormatErrorKind::DimMismatch: return "dim mismatch";
    case FormatErrorKind::BadSection: return "bad section";
  }
  return "format error";
}

}  // namespace sae
