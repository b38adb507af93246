// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/cli.hpp"

int main(int argc, char** argv) { return kele::cli::run(argc, argv); }
