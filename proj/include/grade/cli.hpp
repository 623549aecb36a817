// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace grade {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitDegenerate = 3;
inline constexpr int kExitCheckFailed = 4;

/// Entry point of the `grade` command. Returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace grade
