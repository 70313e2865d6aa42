// SPDX-License-Identifier: Apache-2.0
#include "bractive/losses.hpp"

#include <cmath>

namespace bractive::loss {

void LossConfig::validate() const {
  if (!(sigma > 0) || !std::isfinite(sigma)) throw ConfigError("loss.sigma must be positive");
  if (!(lambda_g >= 0) || !(lambda_m >= 0)) throw ConfigError("loss weights must be nonnegative");
}

ag::Var contras(ag::Var X, ag::Var Y, const LossConfig& cfg, const ag::Var* weights) {
  const auto& xs = X.value().shape();
  const auto& ys = Y.value().shape();
  if (xs.size() != 2 || xs != ys)
    throw DimensionError("contras: batch shapes differ, " + shape_str(xs) + " vs " + shape_str(ys));
  std::size_t N = xs[0];
  if (weights && weights->value().size() != N) throw DimensionError("contras: weight count != batch size");
  if (!(cfg.sigma > 0)) throw ValueError("contras: sigma must be positive");
  auto xn = cfg.normalize_features ? ag::l2_normalize_rows(X) : X;
  auto yn = cfg.normalize_features ? ag::l2_normalize_rows(Y) : Y;
  auto logits = ag::scale(ag::matmul_nt(xn, yn), 1.0 / cfg.sigma);
  std::vector<std::size_t> diag(N);
  for (std::size_t i = 0; i < N; ++i) diag[i] = i * N + i;
  auto row = ag::take(ag::log_softmax_rows(logits), diag, {N});
  auto col = ag::take(ag::log_softmax_rows(ag::transpose(logits)), diag, {N});
  if (weights) {
    auto w = ag::reshape(*weights, {N});
    row = ag::mul(row, w);
    col = ag::mul(col, w);
  }
  return ag::scale(ag::add(ag::sum(row), ag::sum(col)), -1.0 / static_cast<double>(N));
}

ag::Var global_loss(const BatchFeatures& b, const LossConfig& cfg) {
  auto tp = contras(b.T_cls, b.P_cls, cfg);
  auto tf = contras(b.T_cls, b.F_cls, cfg);
  auto fp = contras(b.F_cls, b.P_cls, cfg);
  return ag::add(ag::add(tp, tf), fp);
}

ag::Var weighted_soi_loss(const BatchFeatures& b, const LossConfig& cfg) {
  if (b.slots.empty()) throw DimensionError("weighted_soi_loss: no proposal slots");
  ag::Var acc{};
  for (std::size_t j = 0; j < b.slots.size(); ++j) {
    const auto& s = b.slots[j];
    auto tp = contras(s.T, s.P, cfg, &s.G);
    auto tf = contras(s.T, s.F, cfg, &s.G);
    auto fp = contras(s.F, s.P, cfg, &s.G);
    auto term = ag::add(ag::add(tp, tf), fp);
    acc = j == 0 ? term : ag::add(acc, term);
  }
  return acc;
}

LossParts total_loss(const BatchFeatures& b, const LossConfig& cfg) {
  cfg.validate();
  LossParts out;
  out.global = global_loss(b, cfg);
  out.total = ag::scale(out.global, cfg.lambda_g);
  if (cfg.lambda_m != 0.0) {
    out.soi = weighted_soi_loss(b, cfg);
    out.has_soi = true;
    out.total = ag::add(out.total, ag::scale(out.soi, cfg.lambda_m));
  }
  return out;
}

double contras(const Tensor& X, const Tensor& Y, const LossConfig& cfg) {
  ag::Graph g;
  return contras(g.constant(X), g.constant(Y), cfg).value()[0];
}

double contras_weighted(const Tensor& X, const Tensor& Y, const Tensor& w, const LossConfig& cfg) {
  ag::Graph g;
  auto wv = g.constant(w);
  return contras(g.constant(X), g.constant(Y), cfg, &wv).value()[0];
}

}  // namespace bractive::loss
