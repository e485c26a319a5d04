#include "desire/cli.hpp"
#include "desire/runtime.hpp"

int main(int argc, char** argv) {
  desire::tune_allocator();
  return desire::run_cli(argc, argv);
}
