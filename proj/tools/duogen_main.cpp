// SPDX-License-Identifier: Apache-2.0

#include "duogen/cli.hpp"

int main(int argc, char** argv) { return duogen::run_cli(argc, argv); }
