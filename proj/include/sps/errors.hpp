#pragma once

#include <stdexcept>
#include <string>

namespace sps {

// Exit-code class a failure maps to at the CLI boundary.
enum class ErrorKind { Input = 1, Numerical = 2 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Malformed or inconsistent user input (files, label maps, configs).
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};

/// Binary/text file whose layout does not match its declared format.
class FormatError : public InputError {
 public:
  explicit FormatError(const std::string& what) : InputError(what) {}
};

/// A point that should lie in front of a camera does not.
class CheiralityError : public Error {
 public:
  explicit CheiralityError(const std::string& what)
      : Error(ErrorKind::Numerical, what) {}
};

/// Geometric configuration with no (or no unique) solution.
class DegenerateGeometryError : public Error {
 public:
  explicit DegenerateGeometryError(const std::string& what)
      : Error(ErrorKind::Numerical, what) {}
};

/// Unobservable degree of freedom, e.g. a disconnected K-NN graph.
class GaugeError : public Error {
 public:
  explicit GaugeError(const std::string& what)
      : Error(ErrorKind::Numerical, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorKind::Numerical, what) {}
};

}  // namespace sps
