// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/error.hpp"

namespace grade {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "InvalidInput";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kZeroSpectrum: return "ZeroSpectrum";
    case ErrorKind::kSampleDegenerate: return "SampleDegenerate";
    case ErrorKind::kFormat: return "FormatError";
    case ErrorKind::kTruncated: return "TruncatedError";
    case ErrorKind::kCorruptTensor: return "CorruptTensorError";
    case ErrorKind::kLayerCountMismatch: return "LayerCountMismatch";
    case ErrorKind::kDuplicateId: return "DuplicateIdError";
    case ErrorKind::kUnsupportedObjective: return "UnsupportedObjective";
    case ErrorKind::kDegenerateLabels: return "DegenerateLabels";
    case ErrorKind::kUndefinedAuroc: return "UndefinedAUROC";
    case ErrorKind::kStaleTrace: return "StaleTrace";
    case ErrorKind::kIo: return "IoError";
    case ErrorKind::kCheckFailed: return "CheckFailed";
  }
  return "Unknown";
}

}  // namespace grade
