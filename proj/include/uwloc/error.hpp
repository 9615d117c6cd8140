#pragma once

#include <stdexcept>
#include <string>

namespace uwloc {

/// Failure category. The CLI maps these onto process exit codes.
enum class ErrorKind {
  usage,    // bad arguments, unknown keys, invalid configuration
  data,     // unreadable or inconsistent input data
  numeric,  // non-finite values during computation
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& what) { return {ErrorKind::usage, what}; }
inline Error data_error(const std::string& what) { return {ErrorKind::data, what}; }
inline Error numeric_error(const std::string& what) { return {ErrorKind::numeric, what}; }

}  // namespace uwloc
