// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <numeric>

#include "bractive/grad_check.hpp"
#include "bractive/tensor_io.hpp"
#include "doctest.h"
#include "tiny.hpp"

using namespace bractive;
namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bractive_train_" + name);
  fs::remove_all(p);
  return p;
}

bool same(const enc::Params& a, const enc::Params& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, v] : a)
    if (!b.count(k) || !(b.at(k) == v)) return false;
  return true;
}

}  // namespace

TEST_CASE("adamw update") {
  train::AdamConfig c{0.9, 0.999, 1e-8, 0.0};
  Tensor p = Tensor::vec({1}), m({1}), v({1});
  train::adamw_update(p, Tensor::vec({1}), m, v, 1, 0.1, c);
  CHECK(std::abs(p[0] - (1 - 0.1 * 1 / (1 + 1e-8))) < 1e-15);
  CHECK(std::abs(p[0] - 0.9) < 1e-8);

  Tensor q = Tensor::vec({0.3, -2}), m2({2}), v2({2});
  train::adamw_update(q, Tensor({2}), m2, v2, 1, 0.1, c);
  CHECK(q == Tensor::vec({0.3, -2}));

  c.weight_decay = 0.01;
  Tensor r = Tensor::vec({0.3, -2}), m3({2}), v3({2});
  train::adamw_update(r, Tensor({2}), m3, v3, 1, 0.1, c);
  CHECK(r[0] == 0.3 * (1 - 0.1 * 0.01));
  CHECK(r[1] == -2 * (1 - 0.1 * 0.01));

  // second step against a hand-rolled recursion
  c.weight_decay = 0.0;
  Tensor s = Tensor::vec({0.5}), m4({1}), v4({1});
  train::adamw_update(s, Tensor::vec({0.2}), m4, v4, 1, 0.01, c);
  train::adamw_update(s, Tensor::vec({-0.4}), m4, v4, 2, 0.01, c);
  double mm = 0.1 * 0.2, vv = 0.001 * 0.04, x = 0.5;
  x -= 0.01 * (mm / 0.1) / (std::sqrt(vv / 0.001) + 1e-8);
  mm = 0.9 * mm + 0.1 * -0.4;
  vv = 0.999 * vv + 0.001 * 0.16;
  x -= 0.01 * (mm / (1 - 0.81)) / (std::sqrt(vv / (1 - 0.999 * 0.999)) + 1e-8);
  CHECK(std::abs(s[0] - x) < 1e-15);
  CHECK_THROWS_AS(train::adamw_update(s, Tensor::vec({1, 2}), m4, v4, 3, 0.1, c), DimensionError);
}

TEST_CASE("cosine schedule") {
  CHECK(train::cosine_lr(0, 100, 1e-3) == 1e-3);
  CHECK(train::cosine_lr(100, 100, 1e-3) == 0.0);
  CHECK(std::abs(train::cosine_lr(50, 100, 1e-3) - 5e-4) < 1e-18);
  CHECK(train::cosine_lr(150, 100, 1e-3) == 0.0);
  for (std::size_t s = 1; s <= 100; ++s) CHECK(train::cosine_lr(s, 100, 1.0) <= train::cosine_lr(s - 1, 100, 1.0));
  train::TrainConfig tc;
  tc.base_lr = 1.0;
  tc.warmup_steps = 4;
  CHECK(train::scheduled_lr(0, 100, tc) == 0.25);
  CHECK(train::scheduled_lr(3, 100, tc) == 1.0);
  CHECK(train::scheduled_lr(50, 100, tc) == train::cosine_lr(50, 100, 1.0));
}

TEST_CASE("trainable set excludes the frozen text encoder") {
  auto c = tiny::run_config();
  auto st = train::init_state(c.model, c.train);
  CHECK(st.params.count("soip.W_m") == 1);
  for (const auto& [name, t] : st.params) {
    CHECK(name.rfind("text.", 0) != 0);
    CHECK(st.m.at(name).shape() == t.shape());
    CHECK(st.v.at(name).shape() == t.shape());
  }
  auto text = enc::init_text(c.model.enc);
  for (const auto& [name, t] : text) CHECK(st.params.count(name) == 0);
}

TEST_CASE("train step basics") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  auto items = tiny::prepared(ds, c, iota(8));
  auto b = tiny::batch_of(items, 0, 4);
  auto text_before = enc::init_text(c.model.enc);

  auto st = train::init_state(c.model, c.train);
  auto r = train::train_step(st, b, c.model, c.train, c.loss, 100);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss > 0.0);
  CHECK(r.loss == doctest::Approx(r.global + r.soi).epsilon(1e-12));
  CHECK(st.step == 1);

  auto tc = c.train;
  tc.base_lr = 0.0;
  auto z = train::init_state(c.model, tc);
  auto before = z.params;
  for (int i = 0; i < 3; ++i) train::train_step(z, b, c.model, tc, c.loss, 100);
  CHECK(same(z.params, before));
  CHECK(same(enc::init_text(c.model.enc), text_before));
}

TEST_CASE("W_m stays put without the SOI loss") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  auto items = tiny::prepared(ds, c, iota(8));
  auto lc = c.loss;
  lc.lambda_m = 0.0;
  auto st = train::init_state(c.model, c.train);
  auto w0 = st.params.at("soip.W_m");
  auto v0 = st.params.at("visual.cls");
  for (std::size_t i = 0; i < 6; ++i) train::train_step(st, tiny::batch_of(items, (i % 2) * 4, 4), c.model, c.train, lc, 10);
  CHECK(st.params.at("soip.W_m") == w0);
  CHECK_FALSE(st.params.at("visual.cls") == v0);

  // with the SOI loss on, W_m receives a gradient
  auto st2 = train::init_state(c.model, c.train);
  train::train_step(st2, tiny::batch_of(items, 0, 4), c.model, c.train, c.loss, 10);
  CHECK_FALSE(st2.params.at("soip.W_m") == w0);
}

TEST_CASE("overfitting one batch") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  auto items = tiny::prepared(ds, c, iota(8));
  auto b = tiny::batch_of(items, 0, 8);
  auto tc = c.train;
  tc.base_lr = 3e-3;
  auto st = train::init_state(c.model, tc);
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    auto r = train::train_step(st, b, c.model, tc, c.loss, 50);
    if (i == 0) first = r.loss;
    last = r.loss;
  }
  MESSAGE("loss " << first << " -> " << last);
  CHECK(last <= 0.8 * first);
}

TEST_CASE("total loss gradient at init and after training") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  auto items = tiny::prepared(ds, c, iota(8));
  auto b = tiny::batch_of(items, 0, 3);
  c.train.fp32_storage = false;
  auto st = train::init_state(c.model, c.train);
  for (int round = 0; round < 2; ++round) {
    auto f = train::loss_of_params(st.params, b, c.model, c.train.k, c.loss);
    auto rep = num::grad_check_report(f, train::flatten_params(st.params), 1e-5);
    CAPTURE(round);
    CAPTURE(rep.worst_index);
    CHECK(rep.max_rel_error <= 1e-4);
    for (int i = 0; i < 10; ++i) train::train_step(st, tiny::batch_of(items, (i % 2) * 4, 4), c.model, c.train, c.loss, 10);
  }
}

TEST_CASE("checkpoint round trip and resume") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  auto items = tiny::prepared(ds, c, iota(8));
  auto dir = scratch("ckpt");
  auto st = train::init_state(c.model, c.train);
  for (int i = 0; i < 3; ++i) train::train_step(st, tiny::batch_of(items, (i % 2) * 4, 4), c.model, c.train, c.loss, 20);
  train::save_checkpoint(st, dir, c.model, c.train, c.loss);
  auto back = train::load_checkpoint(dir, c.model);
  CHECK(back.step == st.step);
  CHECK(back.lr == st.lr);
  CHECK(same(back.params, st.params));
  CHECK(same(back.m, st.m));
  CHECK(same(back.v, st.v));
  auto info = train::read_checkpoint_info(dir);
  CHECK(info.step == 3);
  CHECK(info.model.enc.d == 8);

  std::vector<double> a, b2;
  auto cont = st;
  for (int i = 3; i < 13; ++i)
    a.push_back(train::train_step(cont, tiny::batch_of(items, (i % 2) * 4, 4), c.model, c.train, c.loss, 20).loss);
  for (int i = 3; i < 13; ++i)
    b2.push_back(train::train_step(back, tiny::batch_of(items, (i % 2) * 4, 4), c.model, c.train, c.loss, 20).loss);
  CHECK(a == b2);
  CHECK(same(cont.params, back.params));

  auto wrong = c.model;
  wrong.enc.d = 16;
  CHECK_THROWS_AS(train::load_checkpoint(dir, wrong), DimensionError);

  io::write_text(dir / "manifest.json", "{\"format_version\": 99}");
  CHECK_THROWS_AS(train::load_checkpoint(dir, c.model), IoError);
  fs::remove_all(dir);
}

TEST_CASE("trainer resume matches an uninterrupted run") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  train::Trainer t{ds, c.model, c.train, c.loss, {}, 0};
  t.eval.localize = c.localize;

  auto full = train::init_state(c.model, c.train);
  auto full_lines = t.run(full, {});

  // 80 train samples / batch 4 = 20 steps per epoch; stop mid-epoch
  auto dir = scratch("resume");
  auto part = train::init_state(c.model, c.train);
  t.run(part, {dir, 27, nullptr, 1});
  CHECK(part.step == 27);
  train::save_checkpoint(part, dir / "mid", c.model, c.train, c.loss);
  auto resumed = train::load_checkpoint(dir / "mid", c.model);
  auto lines = t.run(resumed, {});
  CHECK(resumed.step == full.step);
  CHECK(same(resumed.params, full.params));
  CHECK(same(resumed.m, full.m));
  REQUIRE(full_lines.size() == 2);
  REQUIRE(lines.size() == 1);
  fs::remove_all(dir);
}

TEST_CASE("run directory contents") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  train::Trainer t{ds, c.model, c.train, c.loss, {}, 1};
  t.eval.localize = c.localize;
  auto dir = scratch("rundir");
  fs::create_directories(dir);
  auto st = train::init_state(c.model, c.train);
  auto lines = t.run(st, {dir, 0, nullptr, 2});
  CHECK(lines.size() == 2);
  CHECK(fs::exists(dir / "checkpoints" / "final" / "tensors.bin"));
  CHECK(fs::exists(dir / "checkpoints" / "step_20" / "manifest.json"));
  CHECK(fs::exists(dir / "checkpoints" / "step_40" / "manifest.json"));
  auto log = io::read_text(dir / "metrics.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 2);
  auto j = nlohmann::json::parse(lines[1]);
  CHECK(j["event"] == "eval");
  CHECK(j["epoch"] == 2);
  CHECK(j["dice"].size() == 9);
  CHECK(std::isfinite(j["train_loss"].get<double>()));
  fs::remove_all(dir);
}

TEST_CASE("evaluation") {
  auto c = tiny::run_config(200);
  const auto& ds = tiny::corpus("eval", 200);
  auto items = tiny::prepared(ds, c, iota(200));
  auto st = train::init_state(c.model, c.train);
  train::EvalOptions opt;
  opt.localize = c.localize;

  auto m = train::evaluate(st, items, c.model, c.train, c.loss, ds.flatten_map(), 3, opt);
  double chance = 0;
  std::size_t pairs = 0;
  for (const auto& it : items) {
    double nv = static_cast<double>(std::count(it.valid.begin(), it.valid.end(), true));
    for (std::size_t i = 0; i < it.present.size(); ++i, ++pairs) chance += std::min(2.0, nv) / nv;
  }
  CHECK(m.pairs == pairs);
  CHECK(std::abs(m.chance_recall - chance / static_cast<double>(pairs)) < 1e-12);
  MESSAGE("untrained recall " << m.soip_recall << " chance " << m.chance_recall);
  CHECK(std::abs(m.soip_recall - m.chance_recall) <= 0.1);
  CHECK(m.mean_dice.size() == 9);
  CHECK(std::isfinite(m.val_loss));
  CHECK(m.baseline_dice > 0.0);
  CHECK(m.baseline_dice <= 1.0);

  auto again = train::evaluate(st, items, c.model, c.train, c.loss, ds.flatten_map(), 3, opt);
  CHECK(again.mean_dice == m.mean_dice);
  CHECK(again.soip_recall == m.soip_recall);
  CHECK(again.val_loss == m.val_loss);
  opt.threads = 3;
  CHECK(train::evaluate(st, items, c.model, c.train, c.loss, ds.flatten_map(), 3, opt).mean_dice == m.mean_dice);

  opt.oracle = true;
  auto o = train::evaluate(st, items, c.model, c.train, c.loss, ds.flatten_map(), 3, opt);
  for (double d : o.mean_dice) CHECK(d == 1.0);
  CHECK_THROWS_AS(train::evaluate(st, {}, c.model, c.train, c.loss, ds.flatten_map(), 3, opt), ValueError);
}

TEST_CASE("baseline dice is the best constant mask") {
  // three classes own disjoint quarters; the all-ones mask scores 2*16/(64+16) = 0.4
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  auto items = tiny::prepared(ds, c, iota(40));
  train::EvalOptions opt;
  opt.localize = c.localize;
  opt.oracle = true;
  opt.compute_loss = false;
  auto st = train::init_state(c.model, c.train);
  auto m = train::evaluate(st, items, c.model, c.train, c.loss, ds.flatten_map(), 3, opt);
  // brute force over every subset of class blocks
  const auto& classes = ds.manifest().classes;
  double best = 0;
  for (unsigned mask = 1; mask < 8; ++mask) {
    std::vector<bool> bits(64, false);
    for (unsigned k = 0; k < 3; ++k)
      if (mask >> k & 1)
        for (auto v : classes[k].roi_block) bits[v] = true;
    double s = 0;
    std::size_t n = 0;
    for (const auto& it : items)
      for (const auto& g : it.gt_masks) {
        s += roi::dice(bits, g.bits);
        ++n;
      }
    best = std::max(best, s / static_cast<double>(n));
  }
  CHECK(m.baseline_dice >= best - 1e-12);
  CHECK(m.baseline_dice >= 0.4 - 1e-12);
}

TEST_CASE("config errors") {
  auto c = tiny::run_config();
  auto tc = c.train;
  tc.batch_size = 1;
  CHECK_THROWS_AS(tc.validate(c.model), ConfigError);
  tc = c.train;
  tc.k = 7;
  CHECK_THROWS_AS(tc.validate(c.model), ConfigError);
  const auto& ds = tiny::corpus("step");
  train::Trainer t{ds, c.model, c.train, c.loss, {}, 5};
  auto st = train::init_state(c.model, c.train);
  CHECK_THROWS_AS(t.run(st, {}), ConfigError);
}

TEST_CASE("non-finite values abort the step with a diagnostic") {
  auto c = tiny::run_config();
  const auto& ds = tiny::corpus("step");
  auto items = tiny::prepared(ds, c, iota(4));
  auto st = train::init_state(c.model, c.train);
  st.params.at("fmri.embed.w")[0] = std::numeric_limits<double>::infinity();
  try {
    train::train_step(st, tiny::batch_of(items, 0, 4), c.model, c.train, c.loss, 10);
    FAIL("step accepted an infinite weight");
  } catch (const ValueError& e) {
    INFO(std::string(e.what()));
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  CHECK(st.step == 0);
}
