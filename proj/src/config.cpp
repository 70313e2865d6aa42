// SPDX-License-Identifier: Apache-2.0
#include "bractive/config.hpp"

#include <type_traits>
#include <variant>
#include <vector>

#include "bractive/tensor_io.hpp"

namespace bractive::config {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields share the size_t slot");

namespace {

struct Field {
  const char* name;
  std::variant<std::size_t*, double*, bool*> slot;
};

std::vector<Field> fields(data::GeneratorConfig& c) {
  return {{"num_samples", &c.num_samples},   {"num_classes", &c.num_classes},
          {"min_subjects", &c.min_subjects}, {"max_subjects", &c.max_subjects},
          {"image_h", &c.image_h},           {"image_w", &c.image_w},
          {"channels", &c.channels},         {"fmri_h", &c.fmri_h},
          {"fmri_w", &c.fmri_w},             {"context", &c.context},
          {"vocab", &c.vocab},               {"min_caption_len", &c.min_caption_len},
          {"noise_std", &c.noise_std},       {"mu_on", &c.mu_on},
          {"mu_off", &c.mu_off},             {"roi_h", &c.roi_h},
          {"roi_w", &c.roi_w},               {"roi_misaligned", &c.roi_misaligned},
          {"blob_min", &c.blob_min},         {"blob_max", &c.blob_max},
          {"folds", &c.folds},               {"seed", &c.seed}};
}

std::vector<Field> fields(train::ModelConfig& c) {
  auto& e = c.enc;
  return {{"d", &e.d},           {"layers", &e.layers},         {"heads", &e.heads},
          {"mlp_ratio", &e.mlp_ratio}, {"image_h", &e.image_h}, {"image_w", &e.image_w},
          {"channels", &e.channels},   {"patch", &e.patch},     {"fmri_h", &e.fmri_h},
          {"fmri_w", &e.fmri_w},       {"fmri_patch", &e.fmri_patch}, {"context", &e.context},
          {"vocab", &e.vocab},         {"text_seed", &e.seed},  {"soir_tau", &c.soir_tau}};
}

std::vector<Field> fields(train::TrainConfig& c) {
  return {{"epochs", &c.epochs},           {"base_lr", &c.base_lr},
          {"batch_size", &c.batch_size},   {"k", &c.k},
          {"weight_decay", &c.weight_decay}, {"beta1", &c.beta1},
          {"beta2", &c.beta2},             {"adam_eps", &c.adam_eps},
          {"warmup_steps", &c.warmup_steps}, {"seed", &c.seed},
          {"eval_every", &c.eval_every},   {"fp32_storage", &c.fp32_storage}};
}

std::vector<Field> fields(loss::LossConfig& c) {
  return {{"sigma", &c.sigma},
          {"lambda_g", &c.lambda_g},
          {"lambda_m", &c.lambda_m},
          {"normalize_features", &c.normalize_features}};
}

std::vector<Field> fields(roi::LocalizeConfig& c) { return {{"s", &c.s}, {"gamma", &c.gamma}}; }

template <class T>
json dump(T c) {
  json j = json::object();
  for (const auto& f : fields(c)) std::visit([&](auto* p) { j[f.name] = *p; }, f.slot);
  return j;
}

void read_field(const Field& f, const json& v, const std::string& where) {
  std::visit(
      [&](auto* p) {
        using V = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<V, bool>) {
          if (!v.is_boolean()) throw ConfigError(where + ": expected true/false");
          *p = v.get<bool>();
        } else if constexpr (std::is_same_v<V, double>) {
          if (!v.is_number()) throw ConfigError(where + ": expected a number");
          *p = v.get<double>();
        } else {
          if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
            throw ConfigError(where + ": expected a nonnegative integer");
          *p = v.get<std::size_t>();
        }
      },
      f.slot);
}

template <class T>
T load_section(const json& j, T base, const std::string& section,
               const std::vector<std::string>& extra = {}) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  auto table = fields(base);
  for (const auto& [key, v] : j.items()) {
    bool hit = false;
    for (const auto& f : table)
      if (key == f.name) {
        read_field(f, v, section + "." + key);
        hit = true;
      }
    for (const auto& e : extra) hit = hit || key == e;
    if (!hit) throw ConfigError("unknown config key " + section + "." + key);
  }
  return base;
}

}  // namespace

json to_json(const data::GeneratorConfig& c) { return dump(c); }
json to_json(const train::ModelConfig& c) { return dump(c); }
json to_json(const train::TrainConfig& c) { return dump(c); }
json to_json(const loss::LossConfig& c) { return dump(c); }

json to_json(const roi::LocalizeConfig& c) {
  auto j = dump(c);
  j["mode"] = c.mode == num::Upsample::bilinear ? "bilinear" : "nearest";
  return j;
}

json to_json(const RunConfig& c) {
  return {{"data", to_json(c.data)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"loss", to_json(c.loss)},
          {"localize", to_json(c.localize)}};
}

data::GeneratorConfig data_from_json(const json& j, data::GeneratorConfig base) {
  return load_section(j, base, "data");
}
train::ModelConfig model_from_json(const json& j, train::ModelConfig base) { return load_section(j, base, "model"); }
train::TrainConfig train_from_json(const json& j, train::TrainConfig base) { return load_section(j, base, "train"); }
loss::LossConfig loss_from_json(const json& j, loss::LossConfig base) { return load_section(j, base, "loss"); }

roi::LocalizeConfig localize_from_json(const json& j, roi::LocalizeConfig base) {
  auto c = load_section(j, base, "localize", {"mode"});
  if (j.contains("mode")) {
    const auto& m = j["mode"];
    if (m == "bilinear") c.mode = num::Upsample::bilinear;
    else if (m == "nearest") c.mode = num::Upsample::nearest;
    else throw ConfigError("localize.mode must be \"bilinear\" or \"nearest\"");
  }
  return c;
}

RunConfig from_json(const json& j, RunConfig base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "data") base.data = data_from_json(v, base.data);
    else if (key == "model") base.model = model_from_json(v, base.model);
    else if (key == "train") base.train = train_from_json(v, base.train);
    else if (key == "loss") base.loss = loss_from_json(v, base.loss);
    else if (key == "localize") base.localize = localize_from_json(v, base.localize);
    else throw ConfigError("unknown config section " + key);
  }
  return base;
}

RunConfig parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

RunConfig load(const std::filesystem::path& p) { return parse(io::read_text(p)); }

void apply_override(RunConfig& c, const std::string& assignment) {
  auto eq = assignment.find('=');
  auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override must look like section.key=value, got " + assignment);
  auto section = assignment.substr(0, dot);
  auto key = assignment.substr(dot + 1, eq - dot - 1);
  auto raw = assignment.substr(eq + 1);
  json v;
  try {
    v = json::parse(raw);
  } catch (const json::parse_error&) {
    v = raw;
  }
  c = from_json(json{{section, json{{key, v}}}}, c);
}

void sync_model_to_data(RunConfig& c) {
  auto& e = c.model.enc;
  e.image_h = c.data.image_h;
  e.image_w = c.data.image_w;
  e.channels = c.data.channels;
  e.fmri_h = c.data.fmri_h;
  e.fmri_w = c.data.fmri_w;
  e.context = c.data.context;
  e.vocab = c.data.vocab;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  train.validate(model);
  loss.validate();
  localize.validate();
  data::check_compatible(data, model.enc);
  if (data.max_subjects > train.k)
    throw ConfigError("train.k must be at least data.max_subjects so every planted subject can be proposed");
  if (localize.s != model.enc.fmri_patch)
    throw ConfigError("localize.s must equal model.fmri_patch so maps cover the fmri grid");
}

}  // namespace bractive::config
