#include <string>
#include <vector>

#include "hesskit/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return hesskit::cli(args);
}
