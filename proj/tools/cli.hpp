// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every command resolves a configuration (INI file
// plus dot-path overrides), writes its artifacts under a fresh run directory
// and prints one summary line.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace poco::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;  // bad arguments, config or inputs
inline constexpr int kExitFailure = 2;  // the command ran and failed

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// git-describe-style version of the build.
std::string version();

}  // namespace poco::cli
