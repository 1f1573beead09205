#pragma once

#include <stdexcept>
#include <string>

namespace cemcol {

// Base for every error raised by the library. Callers that only need to
// report failures can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Electrodes overlap, change order, or cannot fit on the boundary.
class NonOverlapViolation : public Error {
 public:
  using Error::Error;
};

// A point lies outside the domain it was supposed to be in.
class DomainError : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class SolverBreakdown : public Error {
 public:
  using Error::Error;
};

class ResourceLimit : public Error {
 public:
  using Error::Error;
};

// Malformed input files (JSON schema violations, bad binary headers).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace cemcol
