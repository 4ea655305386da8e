#pragma once

#include <stdexcept>
#include <string>

namespace metastep {

/// Malformed arguments: dimension mismatches, empty batches, bad config fields.
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

/// Non-finite intermediate values in an iterative solver.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// A closed-form constant was requested outside its validity region.
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

}  // namespace metastep
