#include <iostream>

#include "cli.hpp"
#include "pixeldino/runtime.hpp"

int main(int argc, char** argv) {
  pixeldino::retain_heap_for_training();
  return pixeldino::cli::run_cli(argc, argv, std::cout, std::cerr);
}
