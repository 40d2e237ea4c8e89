#pragma once

#include <stdexcept>
#include <string>

namespace powercap {

/// Caller supplied arguments that violate an operation's preconditions.
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

/// Argument outside the mathematical domain of a transform.
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

/// Object used in a state that does not permit the call.
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& what) : std::logic_error(what) {}
};

/// Malformed or incompatible file / wire document.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Socket could not be created, reached, or written.
class ConnectionError : public std::runtime_error {
 public:
  explicit ConnectionError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace powercap
