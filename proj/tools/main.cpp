#include <vector>

#include "mtlopt/harness.hpp"

int main(int argc, char** argv) {
  return mtlopt::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
