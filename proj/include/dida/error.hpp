#pragma once

#include <stdexcept>
#include <string>

namespace dida {

enum class ErrorKind {
  dimension,
  contract,
  configuration,
  domain,
  numeric,
  capacity,
  ingestion,
  io,
  compatibility,
  format,
};

const char* to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` carries the category so
/// callers (the CLI in particular) can map failures onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace dida
