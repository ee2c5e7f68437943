#include <iostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "clinfuse/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activations are a few hundred KB each; keep them on the heap instead of
  // paying an mmap/munmap pair per tensor.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  return clinfuse::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
