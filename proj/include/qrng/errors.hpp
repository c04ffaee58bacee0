#pragma once

#include <stdexcept>
#include <string>

namespace qrng {

// A parameter or input violates the documented precondition of an operation.
class InvalidParameter : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A closed-form solve has no real solution for the supplied coefficients.
class NoSolution : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// The measured statistics do not describe a physical state (e.g. lambda < 1).
class InvalidState : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A histogram or sequence has no spread, so a variance-based quantity is undefined.
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// The extractor configuration would emit more bits than the certified entropy supports.
class ExtractionRefused : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qrng
