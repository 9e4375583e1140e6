// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include "poco/diffcore.hpp"

#include <iostream>

int main(int argc, char** argv) {
  poco::ad::retain_freed_memory();
  return poco::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
