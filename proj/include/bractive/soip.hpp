// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "bractive/autograd.hpp"
#include "bractive/tensor.hpp"

namespace bractive::soip {

struct SubjectProposals {
  Tensor G;                        // [k], descending
  std::vector<std::size_t> I;      // [k]
  Tensor T_soi;                    // [k x d]
};

// z = sigmoid(t_cls . W_m^T) with pad positions forced to 0
Tensor confidences(const Tensor& t_cls, const Tensor& W_m, const std::vector<bool>& valid);

// Strict form rejects k larger than the number of valid positions; the
// training path sets pad_fill so short captions still yield k slots.
SubjectProposals propose(const Tensor& t_cls, const Tensor& text_tokens, const std::vector<bool>& valid,
                         const Tensor& W_m, std::size_t k, bool pad_fill = false);

struct BatchProposals {
  ag::Var G;                    // [B x k], differentiable w.r.t. W_m
  std::vector<std::size_t> I;   // B*k caption positions
};

// t_cls [B x d] (constant), W_m [N_c x d], valid B*N_c
BatchProposals propose_batch(ag::Var t_cls, ag::Var W_m, const std::vector<bool>& valid, std::size_t k,
                             bool pad_fill = true);

}  // namespace bractive::soip
