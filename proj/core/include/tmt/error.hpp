#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace tmt {

/// Base class for all library errors. `exit_code()` is the process exit
/// status a CLI front end should use: 2 config, 3 data/format, 4 numeric,
/// 1 for everything else.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg, int exit_code)
      : std::runtime_error(kind + ": " + msg),
        kind_(std::move(kind)),
        exit_code_(exit_code) {}
  const std::string& kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return exit_code_; }

 private:
  std::string kind_;
  int exit_code_;
};

// Shape disagreement between tensor operands.
struct ConformanceError : Error {
  explicit ConformanceError(const std::string& m) : Error("ConformanceError", m, 1) {}
};
// Operation precondition violated (empty input, non-scalar loss, ...).
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("ContractError", m, 1) {}
};
// Object used in an invalid state (consumed tape, non-deterministic fn).
struct StateError : Error {
  explicit StateError(const std::string& m) : Error("StateError", m, 1) {}
};
// Non-finite values where finite ones are required.
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("NumericError", m, 4) {}
};
// Bad hyperparameter or option combination.
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("ConfigError", m, 2) {}
};
// Malformed input file.
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("FormatError", m, 3) {}
};
// Token id outside the vocabulary.
struct VocabError : Error {
  explicit VocabError(const std::string& m) : Error("VocabError", m, 3) {}
};
// Checkpoint does not match the instantiated model.
struct CheckpointError : Error {
  explicit CheckpointError(const std::string& m) : Error("CheckpointError", m, 3) {}
};

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename T, typename... Rest>
void msg_append(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  msg_append(os, rest...);
}
}  // namespace detail

/// Builds an error message from stream-formattable pieces.
template <typename... Args>
std::string msg(const Args&... args) {
  std::ostringstream os;
  detail::msg_append(os, args...);
  return os.str();
}

}  // namespace tmt
