// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/cli.hpp"

int main(int argc, char** argv) { return grade::run_cli(argc, argv); }
