#include <string>
#include <vector>

#include "memopt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return memopt::cli::run_cli(std::move(args));
}
