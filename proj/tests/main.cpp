// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "bractive/ops.hpp"

int main(int argc, char** argv) {
  bractive::num::set_blas_threads(1);
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
