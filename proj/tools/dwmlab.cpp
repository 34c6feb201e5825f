#include <iostream>

#include "dwmlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dwmlab::run_cli(args, std::cout, std::cerr);
}
