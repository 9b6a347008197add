#ifndef SAFELABEL_ERROR_HPP
#define SAFELABEL_ERROR_HPP

#include <stdexcept>
#include <string>

namespace safelabel {

// Three error families, one per CLI exit code (2, 3, 4).

class ValidationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ParseError : public ValidationError {
public:
  ParseError(const std::string& what, std::size_t row)
      : ValidationError(what + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

private:
  std::size_t row_;
};

class UnsupportedDimensionError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class RankError : public NumericError {
public:
  RankError(const std::string& what, double tolerance)
      : NumericError(what), tolerance_(tolerance) {}
  double tolerance() const noexcept { return tolerance_; }

private:
  double tolerance_;
};

class SingularityError : public NumericError {
public:
  using NumericError::NumericError;
};

class BootstrapInstabilityError : public NumericError {
public:
  BootstrapInstabilityError(const std::string& what, std::size_t failures)
      : NumericError(what), failures_(failures) {}
  std::size_t failures() const noexcept { return failures_; }

private:
  std::size_t failures_;
};

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class TransportError : public IoError {
public:
  using IoError::IoError;
};

}  // namespace safelabel

#endif
