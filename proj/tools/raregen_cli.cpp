#include <string>
#include <vector>

#include "raregen/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return raregen::harness::cli_dispatch(args);
}
