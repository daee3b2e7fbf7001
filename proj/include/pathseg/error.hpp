#pragma once

#include <stdexcept>
#include <string>

namespace pathseg {

/// Failure categories shared by every module. The C API maps these one-to-one
/// onto its status codes.
enum class ErrorKind {
  Parameter,
  Timestep,
  Shape,
  Load,
  Validation,
  Grid,
  Mapping,
  DegenerateData,
  Undefined,
  Config,
  Runtime,
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace pathseg
