// SPDX-License-Identifier: Apache-2.0
#include "bractive/self_check.hpp"

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include <unistd.h>

#include "bractive/encoders.hpp"
#include "bractive/losses.hpp"
#include "bractive/random.hpp"
#include "bractive/roi.hpp"
#include "bractive/soip.hpp"
#include "bractive/soir.hpp"
#include "bractive/tensor_io.hpp"
#include "bractive/training.hpp"

namespace bractive::check {

namespace {

Tensor rand_t(Rng& r, Shape s, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = scale * r.normal();
  return t;
}

std::size_t dim(Rng& r, std::size_t lo = 2, std::size_t hi = 5) { return lo + r.below(hi - lo + 1); }

// slices a flat leaf into several shaped inputs
std::vector<ag::Var> unpack(ag::Var x, const std::vector<Shape>& shapes) {
  auto col = ag::reshape(x, {x.value().size(), 1});
  std::vector<ag::Var> out;
  std::size_t off = 0;
  for (const auto& s : shapes) {
    auto n = shape_size(s);
    out.push_back(ag::reshape(ag::slice_rows(col, off, n), s));
    off += n;
  }
  return out;
}

Tensor pack(Rng& r, const std::vector<Shape>& shapes, double scale = 1.0) {
  std::size_t n = 0;
  for (const auto& s : shapes) n += shape_size(s);
  return rand_t(r, {n}, scale);
}

// scalarise y with fixed random weights so every output coordinate matters
ag::Var probe(ag::Var y, const Tensor& w) { return ag::dot(y, y.g->constant(w.reshaped(y.value().shape()))); }

using Body = std::function<ag::Var(ag::Graph&, const std::vector<ag::Var>&)>;

OpCase make(std::string name, Rng& r, std::vector<Shape> shapes, Shape out, Body body, double scale = 1.0) {
  Tensor w = rand_t(r, {shape_size(out)});
  auto f = [shapes, w, body](ag::Graph& g, ag::Var x) { return probe(body(g, unpack(x, shapes)), w); };
  return {std::move(name), f, pack(r, shapes, scale)};
}

ag::Var faulty_sigmoid(ag::Var a) {
  Tensor y = num::sigmoid(a.value());
  Tensor yc = y;
  return a.g->push(std::move(y), {a}, [a, yc](ag::Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 1.05 * d[i] * yc[i] * (1 - yc[i]);
  }, "sigmoid");
}

}  // namespace

std::vector<OpCase> op_cases(std::uint64_t seed, bool fault) {
  Rng r(mix_seed(seed, 0x0C45E));
  std::vector<OpCase> c;
  std::size_t m = dim(r), k = dim(r), n = dim(r);

  c.push_back(make("matmul", r, {{m, k}, {k, n}}, {m, n}, [](auto&, auto& v) { return ag::matmul(v[0], v[1]); }));
  c.push_back(make("matmul_nt", r, {{m, k}, {n, k}}, {m, n}, [](auto&, auto& v) { return ag::matmul_nt(v[0], v[1]); }));
  c.push_back(make("linear", r, {{m, k}, {k, n}, {n}}, {m, n},
                   [](auto&, auto& v) { return ag::linear(v[0], v[1], v[2]); }));
  c.push_back(make("transpose", r, {{m, n}}, {n, m}, [](auto&, auto& v) { return ag::transpose(v[0]); }));
  c.push_back(make("add", r, {{m, n}, {m, n}}, {m, n}, [](auto&, auto& v) { return ag::add(v[0], v[1]); }));
  c.push_back(make("sub", r, {{m, n}, {m, n}}, {m, n}, [](auto&, auto& v) { return ag::sub(v[0], v[1]); }));
  c.push_back(make("mul", r, {{m, n}, {m, n}}, {m, n}, [](auto&, auto& v) { return ag::mul(v[0], v[1]); }));
  double s = r.uniform(-2, 2);
  c.push_back(make("scale", r, {{m, n}}, {m, n}, [s](auto&, auto& v) { return ag::scale(v[0], s); }));
  Tensor cm = rand_t(r, {m, n});
  c.push_back(make("mul_const", r, {{m, n}}, {m, n}, [cm](auto&, auto& v) { return ag::mul_const(v[0], cm); }));
  if (fault)
    c.push_back(make("sigmoid", r, {{m, n}}, {m, n}, [](auto&, auto& v) { return faulty_sigmoid(v[0]); }));
  else
    c.push_back(make("sigmoid", r, {{m, n}}, {m, n}, [](auto&, auto& v) { return ag::sigmoid(v[0]); }));
  c.push_back(make("gelu", r, {{m, n}}, {m, n}, [](auto&, auto& v) { return ag::gelu(v[0]); }));
  std::size_t B = dim(r, 1, 3), T = dim(r), d = dim(r);
  c.push_back(make("add_tiled", r, {{B * T, d}, {T, d}}, {B * T, d},
                   [](auto&, auto& v) { return ag::add_tiled(v[0], v[1]); }));
  c.push_back(make("softmax_rows", r, {{m, n}}, {m, n}, [](auto&, auto& v) { return ag::softmax_rows(v[0]); }));
  c.push_back(make("log_softmax_rows", r, {{m, n}}, {m, n}, [](auto&, auto& v) { return ag::log_softmax_rows(v[0]); }));
  c.push_back(make("l2_normalize_rows", r, {{m, n}}, {m, n},
                   [](auto&, auto& v) { return ag::l2_normalize_rows(v[0]); }));
  c.push_back(make("layer_norm", r, {{m, n}, {n}, {n}}, {m, n},
                   [](auto&, auto& v) { return ag::layer_norm(v[0], v[1], v[2]); }));
  c.push_back(make("reshape", r, {{m, n}}, {n, m}, [m, n](auto&, auto& v) { return ag::reshape(v[0], {n, m}); }));
  std::size_t st = r.below(m), cnt = 1 + r.below(m - st);
  c.push_back(make("slice_rows", r, {{m, n}}, {cnt, n},
                   [st, cnt](auto&, auto& v) { return ag::slice_rows(v[0], st, cnt); }));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < m + 2; ++i) rows.push_back(r.below(m));
  c.push_back(make("gather_rows", r, {{m, n}}, {rows.size(), n},
                   [rows](auto&, auto& v) { return ag::gather_rows(v[0], rows); }));
  std::size_t m2 = dim(r, 1, 4);
  c.push_back(make("concat_rows", r, {{m, n}, {m2, n}, {1, n}}, {m + m2 + 1, n},
                   [](auto&, auto& v) { return ag::concat_rows({v[0], v[1], v[2]}); }));
  c.push_back(make("prepend_rows", r, {{1, d}, {B * T, d}}, {B * (T + 1), d},
                   [B](auto&, auto& v) { return ag::prepend_rows(v[0], v[1], B); }));
  std::vector<std::size_t> flat;
  for (std::size_t i = 0; i < 7; ++i) flat.push_back(r.below(m * n));
  c.push_back(make("take", r, {{m, n}}, {flat.size()},
                   [flat](auto&, auto& v) { return ag::take(v[0], flat, {flat.size()}); }));
  c.push_back(make("sum", r, {{m, n}}, {1}, [](auto&, auto& v) { return ag::sum(v[0]); }));
  c.push_back(make("dot", r, {{m, n}, {m, n}}, {1}, [](auto&, auto& v) { return ag::dot(v[0], v[1]); }));

  std::size_t heads = 2, dm = 2 * dim(r, 1, 3);
  std::vector<bool> keys(B * T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) keys[b * T + t] = t == 0 || r.uniform() < 0.7;
  c.push_back(make("attention", r, {{B * T, 3 * dm}}, {B * T, dm},
                   [B, T, heads](auto&, auto& v) { return ag::attention(v[0], B, T, heads); }));
  c.push_back(make("attention_masked", r, {{B * T, 3 * dm}}, {B * T, dm},
                   [B, T, heads, keys](auto&, auto& v) { return ag::attention(v[0], B, T, heads, &keys); }));

  double tau = r.uniform(0.3, 1.5);
  c.push_back(make("soir_retrieve", r, {{k, d}, {n, d}}, {k, d},
                   [tau](auto&, auto& v) { return soir::retrieve(v[0], v[1], tau); }));
  c.push_back(make("soir_retrieve_batch", r, {{B * k, d}, {B * T, d}}, {B * k, d},
                   [B, tau](auto&, auto& v) { return soir::retrieve_batch(v[0], v[1], B, tau); }));

  std::size_t nc = dim(r, 4, 6), kk = 2;
  Tensor tcls = rand_t(r, {B, d});
  std::vector<bool> valid(B * nc);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < nc; ++i) valid[b * nc + i] = i < nc - r.below(2);
  c.push_back(make("soip_confidences", r, {{nc, d}}, {B, kk}, [tcls, valid, kk](auto& g, auto& v) {
    return soip::propose_batch(g.constant(tcls), v[0], valid, kk, true).G;
  }));

  loss::LossConfig lc;
  lc.sigma = r.uniform(0.1, 1.0);
  std::size_t N = dim(r);
  c.push_back(make("contras", r, {{N, d}, {N, d}}, {1}, [lc](auto&, auto& v) { return loss::contras(v[0], v[1], lc); }));
  auto lc_raw = lc;
  lc_raw.normalize_features = false;
  c.push_back(make("contras_unnormalised", r, {{N, d}, {N, d}}, {1},
                   [lc_raw](auto&, auto& v) { return loss::contras(v[0], v[1], lc_raw); }, 0.3));
  c.push_back(make("contras_weighted", r, {{N, d}, {N, d}, {N}}, {1}, [lc](auto&, auto& v) {
    return loss::contras(v[0], v[1], lc, &v[2]);
  }));
  c.push_back(make("weighted_soi_loss", r, {{N}, {N, d}, {N, d}, {N, d}, {N}, {N, d}, {N, d}, {N, d}}, {1},
                   [lc](auto& g, auto& v) {
                     loss::BatchFeatures bf{v[1], v[2], v[3], {{v[0], v[1], v[2], v[3]}, {v[4], v[5], v[6], v[7]}}};
                     (void)g;
                     return loss::weighted_soi_loss(bf, lc);
                   }));
  return c;
}

OpCase total_loss_case(std::uint64_t seed) {
  Rng r(mix_seed(seed, 0x7074));
  train::ModelConfig mc;
  auto& e = mc.enc;
  e.d = 8;
  e.layers = 1;
  e.heads = 2;
  e.mlp_ratio = 2;
  e.image_h = e.image_w = 8;
  e.patch = 4;
  e.fmri_h = e.fmri_w = 8;
  e.fmri_patch = 4;
  e.context = 6;
  e.vocab = 10;
  e.seed = seed;
  mc.soir_tau = 1.0;
  loss::LossConfig lc;
  lc.sigma = 0.5;
  std::size_t B = 3, k = 2;
  auto text = enc::init_text(e);
  std::vector<train::Prepared> items(B);
  std::vector<enc::TokenSequence> seqs;
  for (std::size_t b = 0; b < B; ++b) {
    enc::ImageSample img{e.image_h, e.image_w, e.channels, Tensor({e.image_h, e.image_w, e.channels})};
    for (auto& v : img.pixels.data()) v = r.uniform();
    Tensor grid = rand_t(r, {e.fmri_h, e.fmri_w});
    enc::TokenSequence t;
    std::size_t len = e.context - r.below(2);
    for (std::size_t i = 0; i < e.context; ++i) {
      t.ids.push_back(i < len ? 1 + r.below(e.vocab - 1) : 0);
      t.valid.push_back(i < len);
    }
    items[b].visual = enc::patchify(img, e.patch);
    items[b].fmri = enc::patchify_grid(grid, e.fmri_patch);
    items[b].valid = t.valid;
    seqs.push_back(t);
  }
  auto tb = enc::encode_text_batch(seqs, text, e);
  for (std::size_t b = 0; b < B; ++b) {
    items[b].text_cls = tb.cls.row_slice(b, 1).reshaped({e.d});
    items[b].text_tokens = tb.tokens.row_slice(b * e.context, e.context);
  }
  std::vector<const train::Prepared*> ptrs;
  for (auto& it : items) ptrs.push_back(&it);
  auto batch = train::make_batch(ptrs);
  // wider than the production init so the check is not dominated by near-zero gradients
  auto params = train::init_params(mc, seed);
  for (auto& [name, t] : params)
    if (name.find(".ln") == std::string::npos)
      for (auto& v : t.data()) v += 0.2 * r.normal();
  return {"total_loss", train::loss_of_params(params, batch, mc, k, lc), train::flatten_params(params)};
}

namespace {

double contras_direct(const Tensor& X, const Tensor& Y, double sigma, const Tensor* w) {
  std::size_t N = X.dim(0), d = X.dim(1);
  auto nx = num::l2_normalize(X, 1), ny = num::l2_normalize(Y, 1);
  std::vector<double> S(N * N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += nx[i * d + c] * ny[j * d + c];
      S[i * N + j] = s / sigma;
    }
  double total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    double zr = 0, zc = 0;
    for (std::size_t j = 0; j < N; ++j) {
      zr += std::exp(S[i * N + j]);
      zc += std::exp(S[j * N + i]);
    }
    double wi = w ? (*w)[i] : 1.0;
    total += wi * (std::log(std::exp(S[i * N + i]) / zr) + std::log(std::exp(S[i * N + i]) / zc));
  }
  return -total / static_cast<double>(N);
}

std::string num_str(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

}  // namespace

std::vector<Result> self_check(bool inject_fault, unsigned instances) {
  std::vector<Result> out;
  auto guard = [&](const std::string& name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("threw: ") + e.what()});
    }
  };

  // gradient checks per op
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (unsigned s = 0; s < instances; ++s)
    for (auto& c : op_cases(s, inject_fault)) {
      if (!worst.count(c.name)) order.push_back(c.name);
      double e = num::grad_check(c.f, c.x);
      worst[c.name] = std::max(worst[c.name], e);
    }
  for (const auto& name : order)
    out.push_back({"grad " + name, worst[name] <= 1e-4, "max rel err " + num_str(worst[name])});

  guard("grad total_loss", [] {
    auto c = total_loss_case(0);
    double e = num::grad_check(c.f, c.x);
    return Result{"grad total_loss", e <= 1e-4, "max rel err " + num_str(e)};
  });

  guard("contras oracle", [] {
    Rng r(7);
    double worst = 0;
    for (int t = 0; t < 10; ++t) {
      std::size_t N = 2 + r.below(7), d = 2 + r.below(6);
      Tensor X = rand_t(r, {N, d}), Y = rand_t(r, {N, d}), w = rand_t(r, {N});
      loss::LossConfig lc;
      lc.sigma = r.uniform(0.05, 1.0);
      worst = std::max(worst, std::abs(loss::contras(X, Y, lc) - contras_direct(X, Y, lc.sigma, nullptr)));
      worst = std::max(worst, std::abs(loss::contras_weighted(X, Y, w, lc) - contras_direct(X, Y, lc.sigma, &w)));
    }
    return Result{"contras oracle", worst <= 1e-10, "max abs diff " + num_str(worst)};
  });

  guard("adamw example", [] {
    Tensor p = Tensor::vec({1.0}), g = Tensor::vec({1.0}), m = Tensor::vec({0.0}), v = Tensor::vec({0.0});
    train::adamw_update(p, g, m, v, 1, 0.1, {0.9, 0.999, 1e-8, 0.0});
    double want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    return Result{"adamw example", std::abs(p[0] - want) <= 1e-15, "p' = " + std::to_string(p[0])};
  });

  guard("cosine schedule", [] {
    bool ok = train::cosine_lr(0, 100, 1e-3) == 1e-3 && train::cosine_lr(100, 100, 1e-3) == 0.0 &&
              std::abs(train::cosine_lr(50, 100, 1e-3) - 5e-4) <= 1e-18 && train::cosine_lr(150, 100, 1e-3) == 0.0;
    return Result{"cosine schedule", ok, ok ? "ok" : "endpoint mismatch"};
  });

  guard("archive round trip", [] {
    Rng r(11);
    io::NamedTensors a{{"x", rand_t(r, {3, 4})}, {"y", rand_t(r, {5})}};
    for (auto& [k, t] : a) io::round_to_f32(t);
    auto dir = std::filesystem::temp_directory_path() / ("bractive_selfcheck_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    io::write_archive(dir / "a.bin", a);
    auto b = io::read_archive(dir / "a.bin");
    std::filesystem::remove_all(dir);
    bool ok = b.size() == a.size() && b.at("x") == a.at("x") && b.at("y") == a.at("y");
    return Result{"archive round trip", ok, ok ? "bitwise equal" : "mismatch"};
  });

  guard("flatten map round trip", [] {
    Rng r(13);
    std::vector<enc::FlattenMap::Cell> cells;
    std::vector<std::size_t> perm(24);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    r.shuffle(perm);
    for (std::size_t v = 0; v < 20; ++v) cells.push_back({perm[v] / 6, perm[v] % 6});
    enc::FlattenMap map(4, 6, cells);
    auto back = enc::FlattenMap::from_json(map.to_json());
    Tensor x = rand_t(r, {20});
    bool ok = back == map && map.unflatten(map.flatten(x)) == x;
    return Result{"flatten map round trip", ok, ok ? "ok" : "mismatch"};
  });

  guard("localization oracle", [] {
    // 2x2 patch grid over a 4x4 identity map, nearest upsampling
    Tensor q = Tensor::vec({1, 0});
    Tensor tok = Tensor::matrix({{1, 0}, {-1, 0}, {0, 1}, {2, 0}});
    roi::LocalizeConfig cfg{2, 0.5, num::Upsample::nearest};
    auto att = roi::attention_map(q, tok, enc::FlattenMap::identity(4, 4), cfg);
    const double want[16] = {1, 1, -1, -1, 1, 1, -1, -1, 0, 0, 1, 1, 0, 0, 1, 1};
    bool ok = att.values.size() == 16;
    for (std::size_t i = 0; ok && i < 16; ++i) ok = att.values[i] == want[i];
    auto mask = roi::threshold_mask(att, 0.5);
    ok = ok && mask.count() == 8;
    return Result{"localization oracle", ok, ok ? "bit exact" : "mismatch"};
  });

  return out;
}

}  // namespace bractive::check
