#pragma once

#include <stdexcept>
#include <string>

namespace csa {

// Error taxonomy mirrored by the CLI exit codes: config -> 2, data -> 3,
// numeric -> 4.  Everything thrown by the library derives from Error so a
// caller can catch one type and still classify.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data", msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

}  // namespace csa
