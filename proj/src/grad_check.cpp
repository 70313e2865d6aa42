// SPDX-License-Identifier: Apache-2.0
#include "bractive/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bractive::num {

double evaluate(const ScalarFn& f, const Tensor& x) {
  ag::Graph g;
  auto y = f(g, g.constant(x));
  if (y.value().size() != 1) throw DimensionError("grad_check: function must return a scalar");
  return y.value()[0];
}

Tensor gradient(const ScalarFn& f, const Tensor& x) {
  ag::Graph g;
  auto xv = g.leaf(x);
  auto y = f(g, xv);
  if (y.value().size() != 1) throw DimensionError("grad_check: function must return a scalar");
  g.backward(y);
  return g.has_grad(xv.id) ? g.grad(xv.id) : Tensor(x.shape(), 0.0);
}

GradCheckReport grad_check_report(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0)) throw ValueError("grad_check: step must be positive");
  require_finite(x, "grad_check input");
  Tensor analytic = gradient(f, x);
  GradCheckReport rep;
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = xp[i];
    xp[i] = orig + h;
    double fp = evaluate(f, xp);
    xp[i] = orig - h;
    double fm = evaluate(f, xp);
    xp[i] = orig;
    double c = (fp - fm) / (2 * h);
    if (!std::isfinite(c)) throw ValueError("grad_check: non-finite central difference");
    double a = analytic[i];
    // rounding in f(x +- h) alone moves c by about eps * |f| / h; that part is not gradient error
    double noise = 16 * std::numeric_limits<double>::epsilon() * (std::abs(fp) + std::abs(fm)) / (2 * h);
    double rel = std::max(0.0, std::abs(a - c) - noise) / std::max({std::abs(a), std::abs(c), 1e-8});
    if (i == 0 || rel > rep.max_rel_error) rep = {rel, i, a, c};
  }
  return rep;
}

double grad_check(const ScalarFn& f, const Tensor& x, double h) { return grad_check_report(f, x, h).max_rel_error; }

}  // namespace bractive::num
