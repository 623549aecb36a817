// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace grade {

/// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kInvalidInput,      // malformed or out-of-contract arguments
  kShapeMismatch,
  kZeroSpectrum,      // a spectrum whose leading value is zero
  kSampleDegenerate,  // a sample whose rank ratio is undefined
  kFormat,            // bad magic / version / JSON schema
  kTruncated,
  kCorruptTensor,     // non-finite payload
  kLayerCountMismatch,
  kDuplicateId,
  kUnsupportedObjective,
  kDegenerateLabels,
  kUndefinedAuroc,
  kStaleTrace,
  kIo,
  kCheckFailed,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when a per-layer or per-step ratio is undefined. Carries the
/// location so callers can report which part of the sample collapsed.
class DegenerateSampleError : public Error {
 public:
  DegenerateSampleError(const std::string& what, int layer, int step = -1)
      : Error(ErrorKind::kSampleDegenerate, what), layer_(layer), step_(step) {}

  int layer() const noexcept { return layer_; }
  int step() const noexcept { return step_; }

 private:
  int layer_;
  int step_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace grade
