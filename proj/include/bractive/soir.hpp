// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "bractive/autograd.hpp"
#include "bractive/tensor.hpp"

namespace bractive::soir {

struct RetrievedSubjectFeature {
  Tensor feature;  // [d]
  Tensor weights;  // [N]
};

// w = softmax(cos(token_i, query) / tau), feature = sum_i w_i token_i
RetrievedSubjectFeature retrieve(const Tensor& query, const Tensor& tokens, double tau = 1.0);

// queries [q x d] against tokens [N x d] -> [q x d]
ag::Var retrieve(ag::Var queries, ag::Var tokens, double tau = 1.0);

// per-sample retrieval: queries [B*k x d], tokens [B*N x d] -> [B*k x d]
ag::Var retrieve_batch(ag::Var queries, ag::Var tokens, std::size_t batch, double tau = 1.0);

}  // namespace bractive::soir
