// SPDX-License-Identifier: Apache-2.0
#include "bractive/soir.hpp"

#include <vector>

namespace bractive::soir {

namespace {

void check_tau(double tau) {
  if (!(tau > 0)) throw ValueError("soir: temperature must be positive");
}

}  // namespace

ag::Var retrieve(ag::Var queries, ag::Var tokens, double tau) {
  check_tau(tau);
  const auto& T = tokens.value();
  if (T.rank() != 2 || T.dim(0) == 0) throw DimensionError("soir: need at least one token");
  if (queries.value().rank() != 2 || queries.value().dim(1) != T.dim(1))
    throw DimensionError("soir: query " + shape_str(queries.value().shape()) + " does not fit tokens " +
                         shape_str(T.shape()));
  auto s = ag::matmul_nt(ag::l2_normalize_rows(queries), ag::l2_normalize_rows(tokens));
  auto w = ag::softmax_rows(ag::scale(s, 1.0 / tau));
  return ag::matmul(w, tokens);
}

RetrievedSubjectFeature retrieve(const Tensor& query, const Tensor& tokens, double tau) {
  check_tau(tau);
  if (tokens.rank() != 2 || tokens.dim(0) == 0) throw DimensionError("soir: need at least one token");
  std::size_t d = tokens.dim(1);
  if (query.size() != d)
    throw DimensionError("soir: query length " + std::to_string(query.size()) + " != token width " +
                         std::to_string(d));
  ag::Graph g;
  auto q = g.constant(query.reshaped({1, d}));
  auto t = g.constant(tokens);
  auto s = ag::matmul_nt(ag::l2_normalize_rows(q), ag::l2_normalize_rows(t));
  auto w = ag::softmax_rows(ag::scale(s, 1.0 / tau));
  auto f = ag::matmul(w, t);
  return {f.value().reshaped({d}), w.value().reshaped({tokens.dim(0)})};
}

ag::Var retrieve_batch(ag::Var queries, ag::Var tokens, std::size_t batch, double tau) {
  const auto& Q = queries.value();
  const auto& T = tokens.value();
  if (batch == 0 || Q.dim(0) % batch != 0 || T.dim(0) % batch != 0)
    throw DimensionError("soir: batch of " + std::to_string(batch) + " does not divide " + shape_str(Q.shape()) +
                         " / " + shape_str(T.shape()));
  std::size_t k = Q.dim(0) / batch, n = T.dim(0) / batch;
  std::vector<ag::Var> parts;
  parts.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b)
    parts.push_back(retrieve(ag::slice_rows(queries, b * k, k), ag::slice_rows(tokens, b * n, n), tau));
  return ag::concat_rows(parts);
}

}  // namespace bractive::soir
