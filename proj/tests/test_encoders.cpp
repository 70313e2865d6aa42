// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>

#include "bractive/encoders.hpp"
#include "bractive/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bractive;
namespace fs = std::filesystem;

namespace {

enc::EncoderConfig small() {
  enc::EncoderConfig c;
  c.d = 8;
  c.layers = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.image_h = c.image_w = 8;
  c.channels = 3;
  c.patch = 4;
  c.fmri_h = c.fmri_w = 8;
  c.fmri_patch = 4;
  c.context = 6;
  c.vocab = 10;
  return c;
}

enc::ImageSample image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  enc::ImageSample img{h, w, c, oracle::random({h, w, c}, seed)};
  return img;
}

}  // namespace

TEST_CASE("patchify shapes and order") {
  auto a = enc::patchify(image(32, 32, 1, 1), 8);
  CHECK(a.shape() == Shape{16, 64});
  CHECK(enc::patchify(image(224, 224, 3, 2), 16).shape() == Shape{196, 768});

  enc::ImageSample ramp{4, 4, 1, Tensor({4, 4, 1})};
  for (std::size_t i = 0; i < 16; ++i) ramp.pixels[i] = static_cast<double>(i);
  auto p = enc::patchify(ramp, 2);
  // patch 1 is the top-right 2x2 block
  CHECK(p.at(1, 0) == 2.0);
  CHECK(p.at(1, 1) == 3.0);
  CHECK(p.at(1, 2) == 6.0);
  CHECK(p.at(1, 3) == 7.0);
  CHECK(p.at(2, 0) == 8.0);

  enc::ImageSample flat{8, 8, 3, Tensor({8, 8, 3}, 0.4)};
  auto q = enc::patchify(flat, 4);
  for (std::size_t r = 1; r < q.rows(); ++r)
    for (std::size_t c = 0; c < q.cols(); ++c) CHECK(q.at(r, c) == q.at(0, c));
  CHECK_THROWS_AS(enc::patchify(image(10, 8, 1, 3), 4), DimensionError);
}

TEST_CASE("flatten map") {
  auto id = enc::FlattenMap::identity(4, 4);
  enc::FmriSample f{Tensor({16})};
  for (std::size_t i = 0; i < 16; ++i) f.voxels[i] = static_cast<double>(i);
  auto g = enc::flatten_fmri(f, id);
  CHECK(g.shape() == Shape{4, 4});
  for (std::size_t i = 0; i < 16; ++i) CHECK(g[i] == static_cast<double>(i));
  CHECK(id.unflatten(g) == f.voxels);

  // partial map: 3 voxels scattered on a 2x3 grid
  enc::FlattenMap m(2, 3, {{1, 2}, {0, 0}, {1, 0}});
  auto v = Tensor::vec({5, 6, 7});
  auto grid = m.flatten(v);
  CHECK(grid.at(1, 2) == 5.0);
  CHECK(grid.at(0, 0) == 6.0);
  CHECK(grid.at(1, 0) == 7.0);
  CHECK(grid.at(0, 1) == 0.0);
  CHECK(grid.at(0, 2) == 0.0);
  CHECK(grid.at(1, 1) == 0.0);
  CHECK(m.unflatten(grid) == v);
  CHECK_FALSE(m.covered(1, 1));
  CHECK(m.voxel_at(1, 0).value() == 2);

  CHECK_THROWS_AS(enc::FlattenMap(2, 2, {{0, 0}, {0, 0}}), ValueError);
  CHECK_THROWS_AS(enc::FlattenMap(2, 2, {{2, 0}}), Error);
  CHECK_THROWS_AS(m.flatten(Tensor::vec({1, 2})), DimensionError);

  auto path = fs::temp_directory_path() / "bractive_fmap.json";
  m.save(path);
  CHECK(enc::FlattenMap::load(path) == m);
  fs::remove(path);
}

TEST_CASE("encoder output shapes and determinism") {
  auto cfg = small();
  enc::Params p;
  enc::init_visual(p, cfg, 1);
  enc::init_fmri(p, cfg, 2);
  auto patches = enc::patchify(image(8, 8, 3, 4), 4);
  auto a = enc::encode_visual(patches, p, cfg);
  auto b = enc::encode_visual(patches, p, cfg);
  CHECK(a.cls.size() == cfg.d);
  CHECK(a.tokens.shape() == Shape{cfg.num_patches(), cfg.d});
  CHECK(a.cls == b.cls);
  CHECK(a.tokens == b.tokens);

  // swapping two patches changes the output beyond a row swap
  Tensor sw = patches;
  for (std::size_t c = 0; c < sw.cols(); ++c) std::swap(sw.at(0, c), sw.at(1, c));
  auto s = enc::encode_visual(sw, p, cfg);
  CHECK(max_abs_diff(s.cls, a.cls) > 1e-9);

  auto fz = enc::encode_fmri(Tensor({8, 8}), p, cfg);
  auto fr = enc::encode_fmri(oracle::random({8, 8}, 3), p, cfg);
  CHECK(fz.tokens.shape() == Shape{cfg.num_regions(), cfg.d});
  CHECK(max_abs_diff(fz.cls, fr.cls) > 1e-9);
  CHECK_THROWS_AS(enc::encode_fmri(Tensor({8, 6}), p, cfg), DimensionError);
  CHECK_THROWS_AS(enc::encode_visual(Tensor({3, 48}), p, cfg), DimensionError);
}

TEST_CASE("frozen text encoder") {
  auto cfg = small();
  auto t1 = enc::init_text(cfg);
  auto t2 = enc::init_text(cfg);
  CHECK(t1 == t2);
  enc::TokenSequence seq{{3, 4, 5, 0, 0, 0}, {true, true, true, false, false, false}};
  auto a = enc::encode_text(seq, t1, cfg);
  auto b = enc::encode_text(seq, t2, cfg);
  CHECK(a.cls == b.cls);
  CHECK(a.tokens == b.tokens);
  CHECK(a.tokens.shape() == Shape{cfg.context, cfg.d});
  CHECK(a.valid == seq.valid);

  enc::TokenSequence bad{{3, 10, 0, 0, 0, 0}, {true, true, false, false, false, false}};
  CHECK_THROWS_AS(enc::encode_text(bad, t1, cfg), ValueError);
  enc::TokenSequence holes{{3, 0, 4, 0, 0, 0}, {true, false, true, false, false, false}};
  CHECK_THROWS(enc::encode_text(holes, t1, cfg));
}

TEST_CASE("distinct tokens get distinct frozen features") {
  enc::EncoderConfig cfg;  // desk defaults
  auto text = enc::init_text(cfg);
  std::vector<Tensor> feats;
  for (std::size_t tok = 1; tok < 8; ++tok) {
    enc::TokenSequence s{std::vector<std::size_t>(cfg.context, 0), std::vector<bool>(cfg.context, false)};
    s.ids[0] = tok;
    s.valid[0] = true;
    feats.push_back(enc::encode_text(s, text, cfg).tokens.row_slice(0, 1));
  }
  for (std::size_t i = 0; i < feats.size(); ++i)
    for (std::size_t j = i + 1; j < feats.size(); ++j) CHECK(num::cosine_sim(feats[i], feats[j]) < 0.99);
}
