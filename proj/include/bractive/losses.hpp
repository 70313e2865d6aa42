// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "bractive/autograd.hpp"
#include "bractive/tensor.hpp"

namespace bractive::loss {

struct LossConfig {
  double sigma = 0.07;
  double lambda_g = 1.0;
  double lambda_m = 1.0;
  bool normalize_features = true;

  void validate() const;
};

struct SlotFeatures {
  ag::Var G;  // [N] confidences of this slot
  ag::Var T, P, F;  // [N x d]
};

struct BatchFeatures {
  ag::Var T_cls, P_cls, F_cls;  // [N x d]
  std::vector<SlotFeatures> slots;
};

// symmetric InfoNCE; with weights, sample b's positive log terms are scaled by w_b
ag::Var contras(ag::Var X, ag::Var Y, const LossConfig& cfg, const ag::Var* weights = nullptr);

ag::Var global_loss(const BatchFeatures& batch, const LossConfig& cfg);
ag::Var weighted_soi_loss(const BatchFeatures& batch, const LossConfig& cfg);

struct LossParts {
  ag::Var total, global, soi;
  bool has_soi = false;  // false when lambda_m == 0 and the term was not built
};
LossParts total_loss(const BatchFeatures& batch, const LossConfig& cfg);

// tensor-level conveniences
double contras(const Tensor& X, const Tensor& Y, const LossConfig& cfg);
double contras_weighted(const Tensor& X, const Tensor& Y, const Tensor& w, const LossConfig& cfg);

}  // namespace bractive::loss
