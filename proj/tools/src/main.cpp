#include <iostream>

#include "muffin_cli/cli.hpp"

int main(int argc, char** argv) {
  return muffin::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
