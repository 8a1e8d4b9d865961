#pragma once

#include <stdexcept>
#include <string>

namespace hakd {

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes (config 2, numeric 3, io 4).
enum class ErrorKind {
  invalid_parameter,
  invalid_input,
  invalid_label,
  shape,
  contract,
  degenerate_input,
  generation,
  config,
  report,
  numeric,
  io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error invalid_parameter(const std::string& msg) { return Error(ErrorKind::invalid_parameter, msg); }
inline Error invalid_input(const std::string& msg) { return Error(ErrorKind::invalid_input, msg); }
inline Error invalid_label(const std::string& msg) { return Error(ErrorKind::invalid_label, msg); }
inline Error shape_error(const std::string& msg) { return Error(ErrorKind::shape, msg); }
inline Error contract_error(const std::string& msg) { return Error(ErrorKind::contract, msg); }
inline Error degenerate_input(const std::string& msg) { return Error(ErrorKind::degenerate_input, msg); }
inline Error generation_error(const std::string& msg) { return Error(ErrorKind::generation, msg); }
inline Error config_error(const std::string& msg) { return Error(ErrorKind::config, msg); }
inline Error report_error(const std::string& msg) { return Error(ErrorKind::report, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::numeric, msg); }
inline Error io_error(const std::string& msg) { return Error(ErrorKind::io, msg); }

}  // namespace hakd
