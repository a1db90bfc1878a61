#include <iostream>
#include <string>
#include <vector>

#include "mmel/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mmel::cli::main(args, std::cerr);
}
