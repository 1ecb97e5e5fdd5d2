// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmflow {

enum class ErrorCode {
    kEmptyTargets,
    kOverlap,
    kUnknownId,
    kIncompleteCover,
    kUnknownPreset,
    kShapeMismatch,
    kIndexOutOfBounds,
    kNonfiniteLoss,
    kMissingAdapter,
    kInvalidTimestep,
    kMissingCondition,
    kInvalidSteps,
    kTooSmall,
    kZeroVector,
    kTooFewFrames,
    kMissingModality,
    kConfigMismatch,
    kUnknownVariant,
    kInvalidConfig,
    kIo,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::kEmptyTargets: return "EMPTY_TARGETS";
        case ErrorCode::kOverlap: return "OVERLAP";
        case ErrorCode::kUnknownId: return "UNKNOWN_ID";
        case ErrorCode::kIncompleteCover: return "INCOMPLETE_COVER";
        case ErrorCode::kUnknownPreset: return "UNKNOWN_PRESET";
        case ErrorCode::kShapeMismatch: return "SHAPE_MISMATCH";
        case ErrorCode::kIndexOutOfBounds: return "INDEX_OOB";
        case ErrorCode::kNonfiniteLoss: return "NONFINITE_LOSS";
        case ErrorCode::kMissingAdapter: return "MISSING_ADAPTER";
        case ErrorCode::kInvalidTimestep: return "INVALID_TIMESTEP";
        case ErrorCode::kMissingCondition: return "MISSING_CONDITION";
        case ErrorCode::kInvalidSteps: return "INVALID_STEPS";
        case ErrorCode::kTooSmall: return "TOO_SMALL";
        case ErrorCode::kZeroVector: return "ZERO_VECTOR";
        case ErrorCode::kTooFewFrames: return "TOO_FEW_FRAMES";
        case ErrorCode::kMissingModality: return "MISSING_MODALITY";
        case ErrorCode::kConfigMismatch: return "CONFIG_MISMATCH";
        case ErrorCode::kUnknownVariant: return "UNKNOWN_VARIANT";
        case ErrorCode::kInvalidConfig: return "INVALID_CONFIG";
        case ErrorCode::kIo: return "IO_ERROR";
    }
    return "UNKNOWN";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

#define MMFLOW_CHECK(cond, code, msg)                    \
    do {                                                 \
        if (!(cond)) {                                   \
            throw ::mmflow::Error((code), (msg));        \
        }                                                \
    } while (false)

}  // namespace mmflow
