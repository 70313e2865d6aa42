// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "bractive/grad_check.hpp"
#include "bractive/losses.hpp"
#include "bractive/self_check.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bractive;

TEST_CASE("quadratic gradient") {
  num::ScalarFn f = [](ag::Graph&, ag::Var x) { return ag::dot(x, x); };
  auto x = Tensor::vec({1, 2});
  auto g = num::gradient(f, x);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 4.0);
  CHECK(num::grad_check(f, x, 1e-5) <= 1e-9);
}

TEST_CASE("contras gradient on random features") {
  loss::LossConfig lc;
  for (std::uint64_t s = 0; s < 5; ++s) {
    num::ScalarFn f = [&](ag::Graph&, ag::Var x) {
      auto a = ag::slice_rows(x, 0, 4), b = ag::slice_rows(x, 4, 4);
      return loss::contras(a, b, lc);
    };
    CHECK(num::grad_check(f, oracle::random({8, 8}, s), 1e-5) <= 1e-4);
  }
}

TEST_CASE("every op passes the gradient check") {
  for (std::uint64_t s = 0; s < 4; ++s)
    for (const auto& c : check::op_cases(1000 + s)) {
      CAPTURE(c.name);
      CAPTURE(s);
      CHECK(num::grad_check(c.f, c.x, 1e-5) <= 1e-4);
    }
}

TEST_CASE("a wrong backward is caught") {
  bool found = false;
  for (const auto& c : check::op_cases(7, true))
    if (c.name == "sigmoid") {
      found = true;
      CHECK(num::grad_check(c.f, c.x, 1e-5) > 1e-2);
    }
  CHECK(found);
}

TEST_CASE("backward accumulates over shared inputs") {
  ag::Graph g;
  auto x = g.leaf(Tensor::vec({3}));
  auto y = ag::add(ag::mul(x, x), x);  // x^2 + x
  g.backward(ag::sum(y));
  CHECK(x.grad()[0] == 7.0);
}

TEST_CASE("constants receive no gradient") {
  ag::Graph g;
  auto c = g.constant(Tensor::vec({1, 2}));
  auto x = g.leaf(Tensor::vec({3, 4}));
  g.backward(ag::dot(c, x));
  CHECK_FALSE(g.has_grad(c.id));
  CHECK(x.grad() == Tensor::vec({1, 2}));
}

TEST_CASE("non-finite intermediate is an error") {
  num::ScalarFn f = [](ag::Graph&, ag::Var x) { return ag::sum(ag::scale(x, 1e308)); };
  CHECK_THROWS_AS(num::grad_check(f, Tensor::vec({10.0}), 1e-5), ValueError);
}

TEST_CASE("attention respects the key mask") {
  // with every key but the first masked, each query reads value row 0
  std::size_t d = 4;
  auto qkv = oracle::random({3, 3 * d}, 5);
  std::vector<bool> mask{true, false, false};
  ag::Graph g;
  auto out = ag::attention(g.constant(qkv), 1, 3, 2, &mask).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < d; ++c) CHECK(std::abs(out.at(r, c) - qkv.at(0, 2 * d + c)) < 1e-14);
}
