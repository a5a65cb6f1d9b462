#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aescomp {

/// Base of every error raised by the library. `kind()` is the stable,
/// machine-readable name printed by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string_view kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  std::string_view kind() const noexcept { return kind_; }

 private:
  std::string_view kind_;
};

#define AESCOMP_DEFINE_ERROR(Name)                                      \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  }

AESCOMP_DEFINE_ERROR(IoError);
AESCOMP_DEFINE_ERROR(DecodeError);
AESCOMP_DEFINE_ERROR(ShapeError);
AESCOMP_DEFINE_ERROR(InvalidArgument);
AESCOMP_DEFINE_ERROR(DescriptorMismatch);
AESCOMP_DEFINE_ERROR(GraphError);
AESCOMP_DEFINE_ERROR(NumericsError);
AESCOMP_DEFINE_ERROR(CompositionError);
AESCOMP_DEFINE_ERROR(DegenerateLabels);
AESCOMP_DEFINE_ERROR(ModelMismatch);
AESCOMP_DEFINE_ERROR(ManifestError);
AESCOMP_DEFINE_ERROR(SplitError);
AESCOMP_DEFINE_ERROR(CacheError);
AESCOMP_DEFINE_ERROR(FormatError);
AESCOMP_DEFINE_ERROR(RegistryError);
AESCOMP_DEFINE_ERROR(UsageError);

#undef AESCOMP_DEFINE_ERROR

}  // namespace aescomp
