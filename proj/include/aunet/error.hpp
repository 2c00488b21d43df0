#pragma once

#include <stdexcept>
#include <string>

namespace aunet {

// Every library failure derives from Error and carries a short machine-readable
// code, which the CLI prints as `error: <code>: <message>`.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define AUNET_DEFINE_ERROR(Name, code_str)                              \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(code_str, what) {}   \
  };

AUNET_DEFINE_ERROR(ConfigError, "config")
AUNET_DEFINE_ERROR(ShapeError, "shape")
AUNET_DEFINE_ERROR(ParseError, "parse")
AUNET_DEFINE_ERROR(IntegrityError, "integrity")
AUNET_DEFINE_ERROR(DegenerateBoxError, "degenerate-box")
AUNET_DEFINE_ERROR(InvalidMaskError, "invalid-mask")
AUNET_DEFINE_ERROR(NoModalityError, "no-modality")
AUNET_DEFINE_ERROR(UndefinedApError, "undefined-ap")
AUNET_DEFINE_ERROR(IoError, "io")
AUNET_DEFINE_ERROR(VersionError, "version")
AUNET_DEFINE_ERROR(NumericError, "numeric")
AUNET_DEFINE_ERROR(UsageError, "usage")

#undef AUNET_DEFINE_ERROR

}  // namespace aunet
