#include <iostream>

#include "preprl/cli.hpp"

int main(int argc, char** argv) {
  return preprl::cli::main_entry(argc, argv, std::cout, std::cerr);
}
