// SPDX-License-Identifier: Apache-2.0
#include "bractive/config.hpp"
#include "doctest.h"

using namespace bractive;
using config::json;

TEST_CASE("defaults validate and round trip") {
  config::RunConfig c;
  c.validate();
  auto j = config::to_json(c);
  auto back = config::from_json(j);
  CHECK(config::to_json(back) == j);
  CHECK(j["train"]["k"] == 4);
  CHECK(j["model"]["d"] == 32);
  CHECK(j["loss"]["sigma"] == 0.07);
  CHECK(j["localize"]["mode"] == "bilinear");
  CHECK(j["data"]["num_samples"] == 2500);
}

TEST_CASE("partial files keep defaults") {
  auto c = config::parse(R"({"train": {"epochs": 3}, "localize": {"mode": "nearest"}})");
  CHECK(c.train.epochs == 3);
  CHECK(c.train.batch_size == 32);
  CHECK(c.localize.mode == num::Upsample::nearest);
}

TEST_CASE("unknown keys and bad values are rejected") {
  try {
    config::parse(R"({"train": {"epoch": 3}})");
    FAIL("accepted a typo");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.epoch") != std::string::npos);
  }
  CHECK_THROWS_AS(config::parse(R"({"optim": {}})"), ConfigError);
  CHECK_THROWS_AS(config::parse(R"({"train": {"epochs": -1}})"), ConfigError);
  CHECK_THROWS_AS(config::parse(R"({"train": {"epochs": "ten"}})"), ConfigError);
  CHECK_THROWS_AS(config::parse(R"({"loss": {"normalize_features": 1}})"), ConfigError);
  CHECK_THROWS_AS(config::parse(R"({"localize": {"mode": "cubic"}})"), ConfigError);
  CHECK_THROWS_AS(config::parse("{not json"), ConfigError);
}

TEST_CASE("overrides") {
  config::RunConfig c;
  config::apply_override(c, "train.base_lr=2.5e-5");
  config::apply_override(c, "model.soir_tau=0.1");
  config::apply_override(c, "loss.normalize_features=false");
  config::apply_override(c, "localize.mode=nearest");
  CHECK(c.train.base_lr == 2.5e-5);
  CHECK(c.model.soir_tau == 0.1);
  CHECK_FALSE(c.loss.normalize_features);
  CHECK(c.localize.mode == num::Upsample::nearest);
  CHECK_THROWS_AS(config::apply_override(c, "train.nope=1"), ConfigError);
  CHECK_THROWS_AS(config::apply_override(c, "epochs=1"), ConfigError);
}

TEST_CASE("cross-section checks") {
  config::RunConfig c;
  c.model.enc.d = 30;
  c.validate();
  c.model.enc.heads = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  config::RunConfig d;
  d.data.image_h = 64;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  config::sync_model_to_data(d);
  d.validate();
  config::RunConfig e;
  e.localize.s = 4;
  CHECK_THROWS_AS(e.validate(), ConfigError);
  config::RunConfig f;
  f.data.max_subjects = 5;
  f.data.min_caption_len = 16;
  CHECK_THROWS_AS(f.validate(), ConfigError);
}
