#pragma once

#include <stdexcept>
#include <string>

namespace treeloss {

// Validation errors map to CLI exit code 1, runtime errors to exit code 2.
enum class ErrorKind { Validation, Runtime };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define TREELOSS_DEFINE_ERROR(Name, Kind)                                          \
    class Name : public Error {                                                    \
    public:                                                                        \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}   \
    }

TREELOSS_DEFINE_ERROR(ParseError, Validation);
TREELOSS_DEFINE_ERROR(StructureError, Validation);
TREELOSS_DEFINE_ERROR(WeightError, Validation);
TREELOSS_DEFINE_ERROR(RangeError, Validation);
TREELOSS_DEFINE_ERROR(NormalizationError, Validation);
TREELOSS_DEFINE_ERROR(LabelError, Validation);
TREELOSS_DEFINE_ERROR(EmptyMaskError, Validation);
TREELOSS_DEFINE_ERROR(ConfigError, Validation);
TREELOSS_DEFINE_ERROR(EmptyEvalError, Validation);
TREELOSS_DEFINE_ERROR(ShapeError, Validation);
TREELOSS_DEFINE_ERROR(DivergenceError, Runtime);
TREELOSS_DEFINE_ERROR(IoError, Runtime);

#undef TREELOSS_DEFINE_ERROR

} // namespace treeloss
