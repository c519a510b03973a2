#include <iostream>
#include <string>
#include <vector>

#include "fablelm/cli.hpp"

int main(int argc, char** argv) {
  fablelm::cli::install_signal_handlers();
  std::vector<std::string> args(argv + 1, argv + argc);
  return fablelm::cli::dispatch(args, std::cout, std::cerr);
}
