// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bractive/encoders.hpp"
#include "bractive/losses.hpp"
#include "bractive/roi.hpp"
#include "bractive/soip.hpp"
#include "bractive/synthetic.hpp"

namespace bractive::train {

namespace fs = std::filesystem;

inline constexpr int kCheckpointVersion = 1;

struct ModelConfig {
  enc::EncoderConfig enc;
  double soir_tau = 1.0;

  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 30;
  double base_lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t k = 4;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t warmup_steps = 0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 5;  // epochs between eval events; the final epoch always evaluates
  bool fp32_storage = true;    // parameters and moments kept exactly representable in 32 bits

  void validate(const ModelConfig& m) const;
};

struct TrainState {
  std::size_t step = 0;
  enc::Params params;  // trainable only: visual.*, fmri.*, soip.W_m
  enc::Params m, v;
  double lr = 0.0;
};

enc::Params init_params(const ModelConfig& cfg, std::uint64_t seed);
TrainState init_state(const ModelConfig& cfg, const TrainConfig& tc);

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);
double scheduled_lr(std::size_t step, std::size_t total_steps, const TrainConfig& tc);

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
};
// t is the 1-based step used for bias correction
void adamw_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, std::size_t t, double lr, const AdamConfig& c);

// Model-ready inputs for one sample. Text features come from the frozen
// encoder and are computed once.
struct Prepared {
  std::size_t id = 0;
  Tensor visual;  // [N_p x p*p*c]
  Tensor fmri;    // [N_r x p_f*p_f]
  Tensor text_cls;     // [d]
  Tensor text_tokens;  // [N_c x d]
  std::vector<bool> valid;
  std::vector<std::size_t> present;
  std::vector<std::size_t> subject_pos;  // caption position of each present class token
  std::vector<roi::RoiMask> gt_masks;
};

std::vector<Prepared> prepare(const data::Dataset& ds, const std::vector<std::size_t>& ids, const ModelConfig& cfg,
                              const enc::Params& text, unsigned threads = 1);

struct Batch {
  std::size_t size = 0;
  Tensor visual, fmri, text_cls, text_tokens;
  std::vector<bool> valid;
};
Batch make_batch(const std::vector<const Prepared*>& items);

struct Forward {
  loss::LossParts loss;
  soip::BatchProposals proposals;
};
Forward forward(const enc::ParamVars& pv, const Batch& b, const ModelConfig& cfg, std::size_t k,
                const loss::LossConfig& lc);

// scalar loss of the flattened trainable parameter vector, for gradient checks
std::function<ag::Var(ag::Graph&, ag::Var)> loss_of_params(const enc::Params& layout, const Batch& b,
                                                           const ModelConfig& cfg, std::size_t k,
                                                           const loss::LossConfig& lc);
Tensor flatten_params(const enc::Params& p);

struct StepResult {
  double loss = 0.0, global = 0.0, soi = 0.0;
};
StepResult train_step(TrainState& st, const Batch& b, const ModelConfig& cfg, const TrainConfig& tc,
                      const loss::LossConfig& lc, std::size_t total_steps);

void save_checkpoint(const TrainState& st, const fs::path& dir, const ModelConfig& cfg, const TrainConfig& tc,
                     const loss::LossConfig& lc);
TrainState load_checkpoint(const fs::path& dir, const ModelConfig& expected);

struct CheckpointInfo {
  ModelConfig model;
  TrainConfig train;
  loss::LossConfig loss;
  std::size_t step = 0;
};
CheckpointInfo read_checkpoint_info(const fs::path& dir);

struct EvalOptions {
  std::vector<double> gammas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  roi::LocalizeConfig localize;
  bool oracle = false;        // predicted mask := ground truth (pipeline sanity)
  bool compute_loss = true;
  bool compute_baseline = true;
  unsigned threads = 1;
};

struct EvalMetrics {
  double soip_recall = 0.0;
  double chance_recall = 0.0;
  std::vector<double> gammas;
  std::vector<double> mean_dice;                      // per gamma
  std::vector<std::vector<double>> class_dice;        // [gamma][class], NaN when the class never occurs
  double val_loss = 0.0;
  double baseline_dice = 0.0;  // best constant mask
  std::size_t pairs = 0;       // (sample, present class) pairs scored
};

EvalMetrics evaluate(const TrainState& st, const std::vector<Prepared>& items, const ModelConfig& cfg,
                     const TrainConfig& tc, const loss::LossConfig& lc, const enc::FlattenMap& map,
                     std::size_t num_classes, const EvalOptions& opt);

// fmri tokens per prepared item, computed in chunks
std::vector<Tensor> fmri_tokens(const enc::Params& params, const std::vector<Prepared>& items,
                                const ModelConfig& cfg, unsigned threads = 1);

struct RunOptions {
  fs::path run_dir;  // empty: no files written
  std::size_t max_steps = 0;  // stop early (0 = full schedule); used for resume tests
  std::function<void(const std::string&)> log;  // progress lines
  unsigned threads = 1;  // data preparation only; results do not depend on it
};

struct Trainer {
  const data::Dataset& ds;
  ModelConfig model;
  TrainConfig train;
  loss::LossConfig loss;
  EvalOptions eval;
  std::size_t fold = 0;

  // returns one JSON line per eval event
  std::vector<std::string> run(TrainState& st, const RunOptions& opt) const;
};

}  // namespace bractive::train
