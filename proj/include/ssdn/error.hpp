#pragma once

#include <stdexcept>
#include <string>

namespace ssdn {

// Violated precondition or shape contract.
class ContractViolation : public std::runtime_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed external data: dataset files, checkpoints, configs.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerically degenerate input: zero variance, non-finite intermediates.
class DegenerateInput : public std::runtime_error {
 public:
  explicit DegenerateInput(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ssdn
