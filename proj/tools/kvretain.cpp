// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "kvretain/cli.hpp"

int main(int argc, char** argv) {
    return kvretain::cli::main_entry(argc, argv, std::cout, std::cerr);
}
