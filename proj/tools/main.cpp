#include <iostream>

#include "cli.hpp"
#include "sgat/tensor.hpp"

int main(int argc, char** argv) {
  sgat::tune_allocator();
  return sgat::cli::run(argc, argv, std::cout, std::cerr);
}
