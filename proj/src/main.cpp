#include <string>
#include <vector>

#include "bpc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return bpc::cli_main(args);
}
