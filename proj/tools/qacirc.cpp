// SPDX-License-Identifier: Apache-2.0
#include <string>
#include <vector>

#include "qacirc/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return qacirc::cli::run(args);
}
