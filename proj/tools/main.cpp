// SPDX-License-Identifier: Apache-2.0
#include <malloc.h>

#include "commands.hpp"

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return cbn::cli::run(argc, argv);
}
