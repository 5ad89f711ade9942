#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lora {

/// Failure classes; each maps to a CLI exit code.
enum class ErrorClass {
    Input = 2,          // malformed files, bad names, bad arguments
    Incompatible = 3,   // shapes or configs that cannot be combined
    Numeric = 4,        // non-finite values, SVD failure
};

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
    ErrorClass error_class() const noexcept { return cls_; }
    int exit_code() const noexcept { return static_cast<int>(cls_); }

private:
    ErrorClass cls_;
};

#define LORA_DEFINE_ERROR(Name, Class)                                                    \
    class Name : public Error {                                                           \
    public:                                                                               \
        explicit Name(const std::string& what) : Error(ErrorClass::Class, what) {}        \
    }

LORA_DEFINE_ERROR(NamingError, Input);
LORA_DEFINE_ERROR(ValidationError, Input);
LORA_DEFINE_ERROR(CompletenessError, Input);
LORA_DEFINE_ERROR(IoError, Input);
LORA_DEFINE_ERROR(InputError, Input);
LORA_DEFINE_ERROR(SpecError, Input);
LORA_DEFINE_ERROR(DegenerateInputError, Input);
LORA_DEFINE_ERROR(ShapeError, Incompatible);
LORA_DEFINE_ERROR(CompositionError, Incompatible);
LORA_DEFINE_ERROR(ApplicationError, Incompatible);
LORA_DEFINE_ERROR(NumericError, Numeric);

#undef LORA_DEFINE_ERROR

/// Container parse failure; carries the byte offset where reading went wrong.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : Error(ErrorClass::Input, what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace lora
