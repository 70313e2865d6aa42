// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "bractive/autograd.hpp"

namespace bractive::num {

using ScalarFn = std::function<ag::Var(ag::Graph&, ag::Var)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// max over coordinates of (|analytic - central| - r) / max(|analytic|, |central|, 1e-8),
// r being the rounding bound of the central difference
GradCheckReport grad_check_report(const ScalarFn& f, const Tensor& x, double h = 1e-5);
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

// analytic gradient of f at x
Tensor gradient(const ScalarFn& f, const Tensor& x);
double evaluate(const ScalarFn& f, const Tensor& x);

}  // namespace bractive::num
