// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shorthand for `poco compare-variants ...`.

#include "cli.hpp"

#include "poco/diffcore.hpp"

#include <iostream>

int main(int argc, char** argv) {
  poco::ad::retain_freed_memory();
  std::vector<std::string> args{"compare-variants"};
  args.insert(args.end(), argv + 1, argv + argc);
  return poco::cli::run(args, std::cout, std::cerr);
}
