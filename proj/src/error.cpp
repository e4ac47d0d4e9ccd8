#include "cvsteer/error.hpp"

namespace cvsteer {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::RejectedInput: return "RejectedInput";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::DegenerateClusters: return "DegenerateClusters";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::LayerMismatch: return "LayerMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::UnknownStyle: return "UnknownStyle";
    case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

Error::Error(ErrorCode code, std::string module, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code), module_(std::move(module)) {}

} // namespace cvsteer
