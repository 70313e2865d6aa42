// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>

#include "bractive/roi.hpp"
#include "bractive/tensor_io.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bractive;
namespace fs = std::filesystem;

namespace {

roi::LocalizeConfig nearest(std::size_t s) {
  roi::LocalizeConfig c;
  c.s = s;
  c.mode = num::Upsample::nearest;
  return c;
}

std::vector<bool> bits(std::size_t n, std::vector<std::size_t> on) {
  std::vector<bool> b(n, false);
  for (auto i : on) b[i] = true;
  return b;
}

}  // namespace

TEST_CASE("hand composed 2x2 patch example") {
  auto id = enc::FlattenMap::identity(4, 4);
  auto q = Tensor::vec({1, 0});
  auto toks = Tensor::matrix({{1, 0}, {0, 1}, {0, 1}, {0, 1}});
  auto m = roi::attention_map(q, toks, id, nearest(2));
  Tensor want = Tensor::vec({1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  CHECK(m.values == want);
  CHECK(m.modality == "fmri");
}

TEST_CASE("attention map trivial queries") {
  auto id = enc::FlattenMap::identity(4, 4);
  auto t = Tensor::vec({0.2, -0.7, 1.3});
  Tensor same({4, 3});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) same.at(r, c) = t[c];
  for (auto mode : {num::Upsample::nearest, num::Upsample::bilinear}) {
    auto cfg = nearest(2);
    cfg.mode = mode;
    auto m = roi::attention_map(t, same, id, cfg);
    for (double v : m.values.data()) CHECK(std::abs(v - 1) <= 1e-15);
  }
  auto ortho = Tensor::matrix({{0, 1, 0}, {0, 0, 1}, {0, 2, 3}, {0, -1, 0}});
  auto zero = roi::attention_map(Tensor::vec({1, 0, 0}), ortho, id, nearest(2));
  for (double v : zero.values.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(roi::attention_map(t, Tensor({3, 3}, 1.0), id, nearest(2)), DimensionError);
}

TEST_CASE("attention map ignores query scale") {
  auto id = enc::FlattenMap::identity(8, 8);
  roi::LocalizeConfig cfg;
  cfg.s = 4;
  auto toks = oracle::random({4, 6}, 3);
  Rng r(4);
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto q = oracle::random({6}, s);
    Tensor q2 = q;
    double c = std::exp(6 * r.uniform() - 3);
    for (auto& v : q2.storage()) v *= c;
    CHECK(max_abs_diff(roi::attention_map(q, toks, id, cfg).values, roi::attention_map(q2, toks, id, cfg).values) <=
          1e-12);
  }
}

TEST_CASE("every voxel carries its patch similarity with nearest upsampling") {
  auto id = enc::FlattenMap::identity(8, 8);
  auto q = oracle::random({5}, 1);
  auto toks = oracle::random({4, 5}, 2);
  auto m = roi::attention_map(q, toks, id, nearest(4));
  auto grid = roi::similarity_grid(q, toks, 2, 2);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      std::size_t patch = (r / 4) * 2 + c / 4;
      double cs = num::cosine_sim(q.data(), toks.row(patch));
      CHECK(m.values[r * 8 + c] == grid[patch]);
      CHECK(std::abs(grid[patch] - cs) <= 1e-15);
    }
}

TEST_CASE("threshold mask") {
  auto v = Tensor::vec({0.6, 0.4});
  CHECK(roi::threshold_mask(v, 0.5).bits == std::vector<bool>{true, false});
  auto x = oracle::random({50}, 2, 0.3);
  for (auto& q : x.storage()) q = std::clamp(q, -0.99, 0.99);
  CHECK(roi::threshold_mask(x, -1.0).count() == 50);
  CHECK(roi::threshold_mask(x, 1.0).count() == 0);
  for (double g1 = -0.9; g1 < 0.9; g1 += 0.1) {
    auto a = roi::threshold_mask(x, g1), b = roi::threshold_mask(x, g1 + 0.05);
    for (std::size_t i = 0; i < 50; ++i)
      if (b.bits[i]) CHECK(a.bits[i]);
  }
  CHECK_THROWS_AS(roi::threshold_mask(x, 1.5), ValueError);
}

TEST_CASE("dice") {
  auto a = bits(6, {1, 2});
  CHECK(roi::dice(a, a) == 1.0);
  CHECK(roi::dice(a, bits(6, {4, 5})) == 0.0);
  CHECK(roi::dice(a, bits(6, {2, 3})) == 0.5);
  CHECK(roi::dice(bits(6, {}), bits(6, {})) == 1.0);
  CHECK_THROWS_AS(roi::dice(a, bits(5, {})), DimensionError);
  Rng r(1);
  for (int t = 0; t < 100; ++t) {
    std::vector<bool> x(20), y(20);
    for (std::size_t i = 0; i < 20; ++i) {
      x[i] = r.uniform() < 0.3;
      y[i] = r.uniform() < 0.5;
    }
    double d = roi::dice(x, y);
    CHECK(d == roi::dice(y, x));
    CHECK(d == oracle::dice(x, y));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("visual map covers exactly the matching patch") {
  // 8x8 image, 4x4 patches: token 3 matches the query, the others are orthogonal
  auto toks = Tensor::matrix({{0, 1, 0}, {0, 0, 1}, {0, 1, 1}, {2, 0, 0}});
  auto m = roi::visual_attention_map(Tensor::vec({1, 0, 0}), toks, 8, 8, 4, num::Upsample::nearest);
  CHECK(m.values.shape() == Shape{8, 8});
  for (double g : {0.1, 0.5, 0.9}) {
    auto mask = roi::threshold_mask(m, g);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) CHECK(mask.bits[r * 8 + c] == (r >= 4 && c >= 4));
  }
  Tensor flat({4, 3}, 0.5);
  auto u = roi::visual_attention_map(Tensor::vec({1, -2, 0.5}), flat, 8, 8, 4, num::Upsample::bilinear);
  for (double v : u.values.data()) CHECK(std::abs(v - u.values[0]) <= 1e-15);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto w = roi::visual_attention_map(oracle::random({3}, s), oracle::random({4, 3}, s + 1), 8, 8, 4,
                                       num::Upsample::bilinear);
    for (double v : w.values.data()) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("map export") {
  auto dir = fs::temp_directory_path() / "bractive_roi_test";
  fs::create_directories(dir);
  auto g = Tensor::matrix({{-1, 0, 1}, {0.5, -0.5, 1}});
  roi::write_pgm(dir / "m.pgm", g);
  auto raw = io::read_text(dir / "m.pgm");
  CHECK(raw.rfind("P5\n3 2\n255\n", 0) == 0);
  CHECK(raw.size() == 11 + 6);
  CHECK(static_cast<unsigned char>(raw[11]) == 0);
  CHECK(static_cast<unsigned char>(raw[13]) == 255);

  roi::RoiMask m{bits(10, {0, 3, 9}), 0.5};
  roi::write_mask_csv(dir / "mask.csv", m);
  CHECK(roi::read_mask_csv(dir / "mask.csv") == std::vector<std::size_t>{0, 3, 9});
  fs::remove_all(dir);
}

TEST_CASE("averaging maps") {
  roi::AttentionMap a{Tensor::vec({1, 0}), "fmri", "text"}, b{Tensor::vec({0, 0.5}), "fmri", "text"};
  auto m = roi::average_maps({a, b});
  CHECK(m.values == Tensor::vec({0.5, 0.25}));
}
