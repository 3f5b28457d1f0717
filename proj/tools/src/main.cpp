#include "cli.hpp"
#include "vfm/runtime.hpp"

int main(int argc, char** argv) {
  vfm::tune_allocator();
  return vfm::cli::run(std::vector<std::string>(argv, argv + argc));
}
