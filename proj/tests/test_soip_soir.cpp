// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>

#include "bractive/ops.hpp"
#include "bractive/soip.hpp"
#include "bractive/soir.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bractive;

TEST_CASE("soip worked example") {
  auto t_cls = Tensor::vec({1.0});
  auto W = Tensor::matrix({{2}, {0}, {-2}});
  auto toks = Tensor::matrix({{10}, {20}, {30}});
  auto p = soip::propose(t_cls, toks, {true, true, true}, W, 2);
  CHECK(std::abs(p.G[0] - 1 / (1 + std::exp(-2.0))) < 1e-15);
  CHECK(std::abs(p.G[0] - 0.880797) < 1e-6);
  CHECK(p.G[1] == 0.5);
  CHECK(p.I == std::vector<std::size_t>{0, 1});
  CHECK(p.T_soi == Tensor::matrix({{10}, {20}}));
}

TEST_CASE("soip ties, exhaustive k, strict k") {
  auto t_cls = Tensor::vec({1.0, 0.0});
  Tensor W({4, 2}, 0.3);
  auto toks = oracle::random({4, 2}, 1);
  std::vector<bool> all(4, true);
  CHECK(soip::propose(t_cls, toks, all, W, 1).I == std::vector<std::size_t>{0});
  auto full = soip::propose(t_cls, toks, all, oracle::random({4, 2}, 2), 4);
  auto sorted = full.I;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3});

  std::vector<bool> two{true, true, false, false};
  CHECK_THROWS_AS(soip::propose(t_cls, toks, two, W, 3), ValueError);
  auto filled = soip::propose(t_cls, toks, two, W, 3, true);
  CHECK(filled.G[2] == 0.0);
}

TEST_CASE("soip never proposes pads and gathers exactly") {
  for (std::uint64_t s = 0; s < 40; ++s) {
    std::size_t n = 8, d = 5, k = 3;
    auto t = oracle::random({d}, s);
    auto W = oracle::random({n, d}, s + 1);
    auto toks = oracle::random({n, d}, s + 2);
    std::vector<bool> valid(n, false);
    std::size_t nv = 3 + s % 6;
    for (std::size_t i = 0; i < nv; ++i) valid[i] = true;
    auto p = soip::propose(t, toks, valid, W, k);
    for (std::size_t j = 0; j < k; ++j) {
      CHECK(valid[p.I[j]]);
      CHECK(p.G[j] > 0.0);
      CHECK(p.G[j] < 1.0);
      if (j) CHECK(p.G[j - 1] >= p.G[j]);
      for (std::size_t c = 0; c < d; ++c) CHECK(p.T_soi.at(j, c) == toks.at(p.I[j], c));
    }
    auto u = p.I;
    std::sort(u.begin(), u.end());
    CHECK(std::adjacent_find(u.begin(), u.end()) == u.end());
  }
}

TEST_CASE("soip monotonicity: raising a selected logit keeps it selected") {
  auto t = Tensor::vec({1.0});
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto W = oracle::random({6, 1}, s);
    auto toks = oracle::random({6, 1}, s + 9);
    std::vector<bool> valid(6, true);
    auto before = soip::propose(t, toks, valid, W, 2);
    for (std::size_t i : before.I) {
      Tensor W2 = W;
      W2[i] += 0.5;
      auto after = soip::propose(t, toks, valid, W2, 2);
      CHECK(std::find(after.I.begin(), after.I.end(), i) != after.I.end());
    }
  }
}

TEST_CASE("soir worked examples") {
  auto same = soir::retrieve(Tensor::vec({0.3, -1}), Tensor::matrix({{2, 5}, {2, 5}, {2, 5}}));
  CHECK(max_abs_diff(same.feature, Tensor::vec({2, 5})) <= 1e-15);

  auto r = soir::retrieve(Tensor::vec({1, 0}), Tensor::matrix({{1, 0}, {0, 1}}), 1.0);
  double e = std::exp(1.0);
  CHECK(std::abs(r.weights[0] - e / (e + 1)) < 1e-15);
  CHECK(std::abs(r.weights[1] - 1 / (e + 1)) < 1e-15);
  CHECK(std::abs(r.feature[0] - 0.73106) < 1e-5);
  CHECK(std::abs(r.feature[1] - 0.26894) < 1e-5);

  auto o = soir::retrieve(Tensor::vec({0, 0, 1}), Tensor::matrix({{1, 0, 0}, {0, 3, 0}, {-1, 1, 0}}));
  CHECK(max_abs_diff(o.feature, Tensor::vec({0, 4.0 / 3, 0})) <= 1e-15);
  CHECK_THROWS_AS(soir::retrieve(Tensor::vec({1}), Tensor({0, 1})), DimensionError);
  CHECK_THROWS_AS(soir::retrieve(Tensor::vec({1}), Tensor::matrix({{1}}), 0.0), ValueError);
}

TEST_CASE("soir properties") {
  for (std::uint64_t s = 0; s < 40; ++s) {
    std::size_t n = 2 + s % 7, d = 4;
    auto q = oracle::random({d}, s);
    auto toks = oracle::random({n, d}, s + 77);
    auto r = soir::retrieve(q, toks);
    double ws = 0;
    for (double w : r.weights.data()) {
      CHECK(w >= 0.0);
      ws += w;
    }
    CHECK(std::abs(ws - 1) <= 1e-12);
    Tensor fw({d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) fw[c] += r.weights[i] * toks.at(i, c);
    CHECK(max_abs_diff(fw, r.feature) <= 1e-12);

    // permutation equivariance
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(s);
    rng.shuffle(perm);
    Tensor pt({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) pt.at(i, c) = toks.at(perm[i], c);
    auto rp = soir::retrieve(q, pt);
    CHECK(max_abs_diff(rp.feature, r.feature) <= 1e-12);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(rp.weights[i] - r.weights[perm[i]]) <= 1e-12);

    // query scale invariance
    Tensor q2 = q;
    for (auto& v : q2.storage()) v *= 4.5;
    CHECK(max_abs_diff(soir::retrieve(q2, toks).feature, r.feature) <= 1e-12);

    // convex hull in 1-d
    auto t1 = oracle::random({n, 1}, s + 5);
    auto r1 = soir::retrieve(Tensor::vec({s % 2 ? 1.0 : -1.0}), t1);
    auto [lo, hi] = std::minmax_element(t1.data().begin(), t1.data().end());
    CHECK(r1.feature[0] >= *lo - 1e-15);
    CHECK(r1.feature[0] <= *hi + 1e-15);
  }
}

TEST_CASE("soir approaches argmax as tau goes to zero") {
  int checked = 0;
  for (std::uint64_t s = 0; s < 200 && checked < 20; ++s) {
    auto q = oracle::random({4}, s);
    auto toks = oracle::random({5, 4}, s + 3);
    std::vector<double> c(5);
    for (std::size_t i = 0; i < 5; ++i) c[i] = num::cosine_sim(q.data(), toks.row(i));
    auto order = num::topk(c, 2);
    if (order.values[0] - order.values[1] < 0.1) continue;
    ++checked;
    auto r = soir::retrieve(q, toks, 1e-4);
    CHECK(max_abs_diff(r.feature, toks.row_slice(order.indices[0], 1).reshaped({4})) <= 1e-6);
  }
  CHECK(checked == 20);
}

TEST_CASE("batched retrieval matches per-sample retrieval") {
  std::size_t B = 3, k = 2, n = 4, d = 5;
  auto Q = oracle::random({B * k, d}, 1);
  auto T = oracle::random({B * n, d}, 2);
  ag::Graph g;
  auto out = soir::retrieve_batch(g.constant(Q), g.constant(T), B, 0.5).value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < k; ++j) {
      auto r = soir::retrieve(Q.row_slice(b * k + j, 1).reshaped({d}), T.row_slice(b * n, n), 0.5);
      CHECK(max_abs_diff(out.row_slice(b * k + j, 1).reshaped({d}), r.feature) <= 1e-14);
    }
}
