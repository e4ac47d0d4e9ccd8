#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cvsteer {

enum class ErrorCode {
    RejectedInput,
    IoFailure,
    SchemaViolation,
    ContextOverflow,
    DivergenceDetected,
    InsufficientSamples,
    DegenerateClusters,
    EmptyCorpus,
    DimensionMismatch,
    LayerMismatch,
    ZeroVector,
    LengthMismatch,
    UnknownToken,
    UnknownStyle,
    BudgetExceeded,
    ConfigError,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure surfaced by the library carries a machine-readable code and
// the module that raised it.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, std::string module, const std::string& message);

    ErrorCode code() const noexcept { return code_; }
    const std::string& module() const noexcept { return module_; }

private:
    ErrorCode code_;
    std::string module_;
};

} // namespace cvsteer
