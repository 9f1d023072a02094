#pragma once

#include <stdexcept>
#include <string>

namespace mkv {

// All library errors derive from Error so callers can catch one type at the
// CLI boundary and map it to a nonzero exit.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeMismatch : Error {
  using Error::Error;
};
struct NonFiniteValue : Error {
  using Error::Error;
};
struct NotScalar : Error {
  using Error::Error;
};
struct SingularMatrix : Error {
  using Error::Error;
};
struct NotSymmetric : Error {
  using Error::Error;
};
struct NoConvergence : Error {
  using Error::Error;
};
struct ContextOverflow : Error {
  using Error::Error;
};
struct RankOutOfRange : Error {
  using Error::Error;
};
struct InsufficientTokens : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct FormatVersionMismatch : Error {
  using Error::Error;
};
struct NotRepresentable : Error {
  using Error::Error;
};
struct InfeasibleBudget : Error {
  using Error::Error;
};
struct ConflictingFlags : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace mkv
