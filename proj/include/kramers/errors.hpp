#pragma once

#include <stdexcept>
#include <string>

namespace kramers {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed arguments: wrong shapes, non-finite entries, bad parameters.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// A spectral precondition (positive definiteness, stability) does not hold.
class SpectralError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long path_index, double last_finite_time)
      : Error(what), path_index_(path_index), last_finite_time_(last_finite_time) {}

  long path_index() const { return path_index_; }
  double last_finite_time() const { return last_finite_time_; }

 private:
  long path_index_;
  double last_finite_time_;
};

}  // namespace kramers
