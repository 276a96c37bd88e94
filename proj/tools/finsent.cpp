// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <string>
#include <vector>

#include "finsent/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return finsent::run_cli(args, std::cout, std::cerr);
}
