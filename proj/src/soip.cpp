// SPDX-License-Identifier: Apache-2.0
#include "bractive/soip.hpp"

#include <algorithm>

#include "bractive/ops.hpp"

namespace bractive::soip {

namespace {

std::size_t count_valid(const std::vector<bool>& v, std::size_t begin, std::size_t n) {
  return static_cast<std::size_t>(std::count(v.begin() + static_cast<std::ptrdiff_t>(begin),
                                             v.begin() + static_cast<std::ptrdiff_t>(begin + n), true));
}

void check_k(std::size_t k, std::size_t n, std::size_t valid, bool pad_fill) {
  if (k == 0 || k > n) throw ValueError("soip: k=" + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
  if (!pad_fill && k > valid)
    throw ValueError("soip: k=" + std::to_string(k) + " exceeds the " + std::to_string(valid) + " valid positions");
}

}  // namespace

Tensor confidences(const Tensor& t_cls, const Tensor& W_m, const std::vector<bool>& valid) {
  if (W_m.rank() != 2 || t_cls.size() != W_m.dim(1))
    throw DimensionError("soip: t_cls of size " + std::to_string(t_cls.size()) + " does not fit W_m " +
                         shape_str(W_m.shape()));
  std::size_t n = W_m.dim(0), d = W_m.dim(1);
  if (valid.size() != n) throw DimensionError("soip: valid mask length " + std::to_string(valid.size()) + " != N_c");
  Tensor z({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += t_cls[c] * W_m[i * d + c];
    z[i] = valid[i] ? num::sigmoid(s) : 0.0;
  }
  require_finite(z, "soip confidences");
  return z;
}

SubjectProposals propose(const Tensor& t_cls, const Tensor& text_tokens, const std::vector<bool>& valid,
                         const Tensor& W_m, std::size_t k, bool pad_fill) {
  auto z = confidences(t_cls, W_m, valid);
  std::size_t n = z.size(), d = W_m.dim(1);
  if (text_tokens.rank() != 2 || text_tokens.dim(0) != n || text_tokens.dim(1) != d)
    throw DimensionError("soip: text tokens " + shape_str(text_tokens.shape()) + " do not match W_m " +
                         shape_str(W_m.shape()));
  check_k(k, n, count_valid(valid, 0, n), pad_fill);
  auto top = num::topk(z, k);
  Tensor T({k, d});
  for (std::size_t j = 0; j < k; ++j) std::copy_n(text_tokens.ptr() + top.indices[j] * d, d, T.ptr() + j * d);
  return {std::move(top.values), std::move(top.indices), std::move(T)};
}

BatchProposals propose_batch(ag::Var t_cls, ag::Var W_m, const std::vector<bool>& valid, std::size_t k,
                             bool pad_fill) {
  std::size_t B = t_cls.value().dim(0), n = W_m.value().dim(0);
  if (valid.size() != B * n) throw DimensionError("soip: valid mask does not cover the batch");
  Tensor mask({B, n});
  for (std::size_t i = 0; i < B * n; ++i) mask[i] = valid[i] ? 1.0 : 0.0;
  auto z = ag::mul_const(ag::sigmoid(ag::matmul_nt(t_cls, W_m)), mask);
  std::vector<std::size_t> flat, idx;
  flat.reserve(B * k);
  idx.reserve(B * k);
  for (std::size_t b = 0; b < B; ++b) {
    check_k(k, n, count_valid(valid, b * n, n), pad_fill);
    auto top = num::topk(z.value().row(b), k);
    for (auto i : top.indices) {
      flat.push_back(b * n + i);
      idx.push_back(i);
    }
  }
  return {ag::take(z, flat, {B, k}), std::move(idx)};
}

}  // namespace bractive::soip
