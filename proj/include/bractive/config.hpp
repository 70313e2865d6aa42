// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "bractive/losses.hpp"
#include "bractive/roi.hpp"
#include "bractive/synthetic.hpp"
#include "bractive/training.hpp"
#include "json.hpp"

namespace bractive::config {

using json = nlohmann::json;

// Sections: data, model, train, loss, localize. Missing keys keep their
// defaults; unknown keys are errors.
struct RunConfig {
  data::GeneratorConfig data;
  train::ModelConfig model;
  train::TrainConfig train;
  loss::LossConfig loss;
  roi::LocalizeConfig localize;

  void validate() const;
};

json to_json(const data::GeneratorConfig& c);
json to_json(const train::ModelConfig& c);
json to_json(const train::TrainConfig& c);
json to_json(const loss::LossConfig& c);
json to_json(const roi::LocalizeConfig& c);
json to_json(const RunConfig& c);

data::GeneratorConfig data_from_json(const json& j, data::GeneratorConfig base = {});
train::ModelConfig model_from_json(const json& j, train::ModelConfig base = {});
train::TrainConfig train_from_json(const json& j, train::TrainConfig base = {});
loss::LossConfig loss_from_json(const json& j, loss::LossConfig base = {});
roi::LocalizeConfig localize_from_json(const json& j, roi::LocalizeConfig base = {});
RunConfig from_json(const json& j, RunConfig base = {});

RunConfig load(const std::filesystem::path& p);
RunConfig parse(const std::string& text);

// "section.key=value", value parsed as JSON when possible, else as a string
void apply_override(RunConfig& c, const std::string& assignment);

// model dims that follow from the data section (image, fmri grid, context, vocab)
void sync_model_to_data(RunConfig& c);

}  // namespace bractive::config
