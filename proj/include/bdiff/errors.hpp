#pragma once

#include <stdexcept>
#include <string>

namespace bdiff {

// Every library error carries a short class tag so the CLI can print a
// one-line, greppable diagnostic ("error[ShapeError]: ...").
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define BDIFF_DEFINE_ERROR(Name)                                      \
    class Name : public Error {                                       \
    public:                                                           \
        explicit Name(const std::string& what) : Error(#Name, what) {} \
    }

BDIFF_DEFINE_ERROR(ConfigError);
BDIFF_DEFINE_ERROR(IndexError);
BDIFF_DEFINE_ERROR(ShapeError);
BDIFF_DEFINE_ERROR(ValidationError);
BDIFF_DEFINE_ERROR(ContractViolation);
BDIFF_DEFINE_ERROR(EmptyBoundary);
BDIFF_DEFINE_ERROR(IoError);
BDIFF_DEFINE_ERROR(NonFiniteLoss);
BDIFF_DEFINE_ERROR(CheckpointError);

#undef BDIFF_DEFINE_ERROR

}  // namespace bdiff
