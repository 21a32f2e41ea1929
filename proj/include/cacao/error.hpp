#pragma once

#include <stdexcept>
#include <string>

namespace cacao {

// Mirrors cacao_status in cacao.h; values must stay in sync.
enum class ErrorCode : int {
    InvalidArgument = 1,
    InvalidShape,
    ShapeMismatch,
    InvalidValue,
    InvalidLabel,
    Io,
    NotAModel,
    Corruption,
    Version,
    Validation,
    EmptyClass,
    Stratification,
    MissingRecommendation,
    NotFound,
    Config,
    Input,
    Divergence,
    ResourceLimit,
    Internal,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace cacao
