// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bractive/grad_check.hpp"

namespace bractive::check {

struct OpCase {
  std::string name;
  num::ScalarFn f;
  Tensor x;
};

// one random instance of every differentiable operation, all dims <= 8.
// With fault set, the sigmoid case carries a deliberately wrong backward.
std::vector<OpCase> op_cases(std::uint64_t seed, bool fault = false);

// total loss of a tiny model as a function of all trainable parameters
OpCase total_loss_case(std::uint64_t seed);

struct Result {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Result> self_check(bool inject_fault, unsigned instances = 3);

}  // namespace bractive::check
