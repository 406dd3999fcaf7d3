#include <iostream>

#include "cdg/alloc.hpp"
#include "cdg/cli/cli.hpp"

int main(int argc, char** argv) {
  cdg::configure_allocator();
  return cdg::cli::run(argc, argv, std::cout, std::cerr);
}
