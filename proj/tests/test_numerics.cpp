// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>

#include "bractive/ops.hpp"
#include "bractive/tensor_io.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bractive;
namespace fs = std::filesystem;

TEST_CASE("matmul small products") {
  auto I = Tensor::matrix({{1, 0}, {0, 1}});
  auto B = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(num::matmul(I, B) == B);
  CHECK(num::matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}))[0] == 11.0);
  CHECK_THROWS_AS(num::matmul(B, Tensor::matrix({{1, 2, 3}})), DimensionError);
}

TEST_CASE("matmul agrees with triple loop") {
  for (std::uint64_t s = 0; s < 30; ++s) {
    std::size_t m = 1 + s % 8, k = 1 + (s * 3) % 8, n = 1 + (s * 5) % 8;
    auto a = oracle::random({m, k}, s);
    auto b = oracle::random({k, n}, s + 100);
    CHECK(max_abs_diff(num::matmul(a, b), oracle::matmul(a, b)) <= 1e-12);
    CHECK(max_abs_diff(num::matmul_nt(a, num::transpose(b)), oracle::matmul(a, b)) <= 1e-12);
  }
}

TEST_CASE("softmax values") {
  auto u = num::softmax(Tensor::vec({0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  auto p = num::softmax(Tensor::vec({1, 0}));
  double e = std::exp(1.0);
  CHECK(std::abs(p[0] - e / (e + 1)) < 1e-15);
  CHECK(std::abs(p[1] - 1 / (e + 1)) < 1e-15);
  auto big = num::softmax(Tensor::vec({1000, 0}));
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
}

TEST_CASE("softmax rows sum to one, extreme magnitudes included") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    double scale = s % 2 ? 1e3 : 1.0;
    auto x = oracle::random({4, 7}, s, scale);
    auto y = num::softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double t = 0;
      for (double v : y.row(r)) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        t += v;
      }
      CHECK(std::abs(t - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("sigmoid") {
  CHECK(num::sigmoid(0.0) == 0.5);
  CHECK(std::abs(num::sigmoid(2.0) - 1 / (1 + std::exp(-2.0))) < 1e-16);
  CHECK(std::abs(num::sigmoid(2.0) - 0.880797) < 1e-6);
  CHECK(std::abs(num::sigmoid(-2.0) - 0.119203) < 1e-6);
  for (double x : {-30.0, -3.5, -0.1, 0.7, 12.0}) CHECK(std::abs(num::sigmoid(x) + num::sigmoid(-x) - 1) < 1e-15);
}

TEST_CASE("l2 normalize") {
  auto v = num::l2_normalize(Tensor::vec({3, 4}));
  CHECK(std::abs(v[0] - 0.6) < 1e-15);
  CHECK(std::abs(v[1] - 0.8) < 1e-15);
  auto z = num::l2_normalize(Tensor::vec({0, 0}), -1, 1e-12);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto x = oracle::random({3, 5}, s);
    auto n1 = num::l2_normalize(x);
    Tensor cx = x;
    for (auto& q : cx.storage()) q *= 7.25;
    CHECK(max_abs_diff(num::l2_normalize(cx), n1) <= 1e-12);
    CHECK(max_abs_diff(num::l2_normalize(n1), n1) <= 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double nn = 0;
      for (double q : n1.row(r)) nn += q * q;
      CHECK(std::abs(std::sqrt(nn) - 1) <= 1e-12);
    }
  }
}

TEST_CASE("cosine similarity") {
  auto a = Tensor::vec({0.3, -2, 5});
  CHECK(std::abs(num::cosine_sim(a, a) - 1) < 1e-15);
  CHECK(num::cosine_sim(Tensor::vec({1, 0}), Tensor::vec({0, 1})) == 0.0);
  CHECK(std::abs(num::cosine_sim(Tensor::vec({1, 1}), Tensor::vec({1, 0})) - 1 / std::sqrt(2.0)) < 1e-15);
  CHECK_THROWS_AS(num::cosine_sim(Tensor::vec({1, 1}), Tensor::vec({1, 0, 0})), DimensionError);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto x = oracle::random({6}, s), y = oracle::random({6}, s + 50);
    double c = num::cosine_sim(x, y);
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
    Tensor x3 = x;
    for (auto& q : x3.storage()) q *= 0.013;
    CHECK(std::abs(num::cosine_sim(x3, y) - c) <= 1e-12);
  }
}

TEST_CASE("topk ordering and tie-break") {
  auto r = num::topk(Tensor::vec({0.1, 0.9, 0.5}), 2);
  CHECK(r.indices == std::vector<std::size_t>{1, 2});
  CHECK(r.values[0] == 0.9);
  CHECK(r.values[1] == 0.5);
  CHECK(num::topk(Tensor::vec({0.5, 0.5}), 1).indices == std::vector<std::size_t>{0});
  auto all = num::topk(Tensor::vec({0.2, 0.7, 0.2, 0.9}), 4);
  CHECK(all.indices == std::vector<std::size_t>{3, 1, 0, 2});
  CHECK_THROWS_AS(num::topk(Tensor::vec({1, 2}), 3), ValueError);
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(8);
    for (auto& q : v) q = static_cast<double>(rng.below(4));  // many ties
    auto a = num::topk(v, 5), b = num::topk(v, 5);
    CHECK(a.indices == b.indices);
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(a.values[j] == v[a.indices[j]]);
      if (j) {
        CHECK(a.values[j - 1] >= a.values[j]);
        if (a.values[j - 1] == a.values[j]) CHECK(a.indices[j - 1] < a.indices[j]);
      }
    }
  }
}

TEST_CASE("upsample") {
  auto g = Tensor::matrix({{1, 2}, {3, 4}});
  auto n = num::upsample2d(g, 2, num::Upsample::nearest);
  CHECK(n == Tensor::matrix({{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}}));
  auto x = oracle::random({3, 4}, 3);
  CHECK(num::upsample2d(x, 1, num::Upsample::bilinear) == x);
  CHECK(num::upsample2d(x, 1, num::Upsample::nearest) == x);
  auto c = num::upsample2d(Tensor({2, 3}, 0.25), 3, num::Upsample::bilinear);
  CHECK(c.shape() == Shape{6, 9});
  for (double v : c.data()) CHECK(std::abs(v - 0.25) <= 1e-15);
  auto b = num::upsample2d(x, 4, num::Upsample::bilinear);
  double lo = *std::min_element(x.data().begin(), x.data().end());
  double hi = *std::max_element(x.data().begin(), x.data().end());
  for (double v : b.data()) {
    CHECK(v >= lo - 1e-12);
    CHECK(v <= hi + 1e-12);
  }
}

TEST_CASE("non-finite values are rejected") {
  Tensor t = Tensor::vec({1, NAN});
  CHECK_THROWS_AS(require_finite(t, "t"), ValueError);
  CHECK_THROWS_AS(num::softmax(Tensor::vec({1, INFINITY})), ValueError);
}

TEST_CASE("tensor files round trip at 32-bit precision") {
  auto dir = fs::temp_directory_path() / "bractive_io_test";
  fs::create_directories(dir);
  auto x = oracle::random({3, 2, 4}, 1);
  io::round_to_f32(x);
  io::write_tensor(dir / "x.bin", x);
  CHECK(io::read_tensor(dir / "x.bin") == x);

  io::NamedTensors a{{"a", x}, {"b", Tensor::vec({0.5, -2})}};
  io::write_archive(dir / "a.bin", a);
  auto back = io::read_archive(dir / "a.bin");
  CHECK(back.size() == 2);
  CHECK(back.at("a") == x);
  CHECK(back.at("b") == a.at("b"));

  auto full = io::read_text(dir / "x.bin");
  io::write_text(dir / "cut.bin", full.substr(0, full.size() - 3));
  CHECK_THROWS_AS(io::read_tensor(dir / "cut.bin"), IoError);
  fs::remove_all(dir);
}
