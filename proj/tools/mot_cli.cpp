#include <iostream>

#include "mot/cli.hpp"

int main(int argc, char** argv) {
  return mot::cli::run_cli(argc, argv, std::cout, std::cerr);
}
