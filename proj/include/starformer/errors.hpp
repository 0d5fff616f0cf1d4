#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace starformer {

// Exit-code families used by the CLI: 2 config, 3 data, 4 numeric.
enum class ErrorKind { config = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

// Shape disagreement between operands.
class DimensionError : public ConfigError {
 public:
  explicit DimensionError(const std::string& what) : ConfigError("dimension: " + what) {}
};

// Caller violated a documented precondition.
class ContractError : public ConfigError {
 public:
  explicit ContractError(const std::string& what) : ConfigError("contract: " + what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class AtlasError : public DataError {
 public:
  explicit AtlasError(const std::string& what) : DataError("atlas: " + what) {}
};

class IntegrityError : public DataError {
 public:
  explicit IntegrityError(const std::string& what) : DataError("integrity: " + what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class SingularFitError : public NumericError {
 public:
  explicit SingularFitError(const std::string& what) : NumericError("singular fit: " + what) {}
};

class ConvergenceError : public NumericError {
 public:
  ConvergenceError(const std::string& what, std::vector<double> last_iterate)
      : NumericError("convergence: " + what), last_iterate_(std::move(last_iterate)) {}
  const std::vector<double>& last_iterate() const noexcept { return last_iterate_; }

 private:
  std::vector<double> last_iterate_;
};

}  // namespace starformer
