// SPDX-License-Identifier: Apache-2.0
#include "bractive/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <thread>

#include "bractive/config.hpp"
#include "bractive/random.hpp"
#include "bractive/soir.hpp"
#include "bractive/tensor_io.hpp"
#include "json.hpp"

namespace bractive::train {

using json = nlohmann::json;

void ModelConfig::validate() const {
  enc.validate();
  if (!(soir_tau > 0) || !std::isfinite(soir_tau)) throw ConfigError("model.soir_tau must be positive");
}

void TrainConfig::validate(const ModelConfig& m) const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(epochs > 0 && batch_size > 0 && k > 0, "train: epochs, batch_size and k must be positive");
  need(batch_size >= 2, "train.batch_size must be at least 2 for contrastive negatives");
  need(k <= m.enc.context, "train.k must not exceed the context length");
  need(base_lr >= 0 && std::isfinite(base_lr), "train.base_lr must be nonnegative");
  need(weight_decay >= 0, "train.weight_decay must be nonnegative");
  need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "train: betas must lie in [0, 1)");
  need(adam_eps > 0, "train.adam_eps must be positive");
}

enc::Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  enc::Params p;
  enc::init_visual(p, cfg.enc, seed);
  enc::init_fmri(p, cfg.enc, seed);
  Rng rng(mix_seed(seed, 404));
  Tensor wm({cfg.enc.context, cfg.enc.d});
  for (auto& v : wm.data()) v = rng.trunc_normal(0.02);
  p["soip.W_m"] = std::move(wm);
  return p;
}

TrainState init_state(const ModelConfig& cfg, const TrainConfig& tc) {
  tc.validate(cfg);
  TrainState st;
  st.params = init_params(cfg, tc.seed);
  for (auto& [name, t] : st.params) {
    if (tc.fp32_storage) io::round_to_f32(t);
    st.m.emplace(name, Tensor(t.shape(), 0.0));
    st.v.emplace(name, Tensor(t.shape(), 0.0));
  }
  st.lr = tc.base_lr;
  return st;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

double scheduled_lr(std::size_t step, std::size_t total_steps, const TrainConfig& tc) {
  if (tc.warmup_steps > 0 && step < tc.warmup_steps)
    return tc.base_lr * static_cast<double>(step + 1) / static_cast<double>(tc.warmup_steps);
  return cosine_lr(step, total_steps, tc.base_lr);
}

void adamw_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, std::size_t t, double lr, const AdamConfig& c) {
  if (g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape())
    throw DimensionError("adamw: shapes differ, param " + shape_str(p.shape()) + " grad " + shape_str(g.shape()));
  if (t == 0) throw ValueError("adamw: step counter starts at 1");
  double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  double decay = 1.0 - lr * c.weight_decay;
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
    double mh = m[i] / bc1, vh = v[i] / bc2;
    p[i] = p[i] * decay - lr * mh / (std::sqrt(vh) + c.eps);
  }
}

// ---- data ----

namespace {

template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex mu;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) f(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!err) err = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace

std::vector<Prepared> prepare(const data::Dataset& ds, const std::vector<std::size_t>& ids, const ModelConfig& cfg,
                              const enc::Params& text, unsigned threads) {
  data::check_compatible(ds.manifest().cfg, cfg.enc);
  const auto& classes = ds.manifest().classes;
  std::vector<Prepared> out(ids.size());
  // text features in fixed chunks so the result does not depend on the thread count
  constexpr std::size_t chunk = 64;
  std::size_t chunks = (ids.size() + chunk - 1) / chunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    std::size_t lo = c * chunk, hi = std::min(ids.size(), lo + chunk);
    std::vector<enc::TokenSequence> seqs;
    for (std::size_t i = lo; i < hi; ++i) {
      auto s = ds.sample(ids[i]);
      auto& p = out[i];
      p.id = s.id;
      p.visual = enc::patchify(s.image, cfg.enc.patch);
      p.fmri = enc::patchify_grid(enc::flatten_fmri(s.fmri, ds.flatten_map()), cfg.enc.fmri_patch);
      p.valid = s.caption.valid;
      p.present = s.present;
      p.subject_pos = data::subject_positions(s, classes);
      p.gt_masks = s.gt_masks;
      seqs.push_back(std::move(s.caption));
    }
    auto tb = enc::encode_text_batch(seqs, text, cfg.enc);
    std::size_t n = cfg.enc.context, d = cfg.enc.d;
    for (std::size_t i = lo; i < hi; ++i) {
      out[i].text_cls = tb.cls.row_slice(i - lo, 1).reshaped({d});
      out[i].text_tokens = tb.tokens.row_slice((i - lo) * n, n);
    }
  });
  return out;
}

Batch make_batch(const std::vector<const Prepared*>& items) {
  if (items.empty()) throw ValueError("train_step: empty batch");
  Batch b;
  b.size = items.size();
  auto stack = [&](auto member) {
    std::vector<double> buf;
    const Tensor& first = items[0]->*member;
    std::size_t rows = first.rows(), cols = first.cols();
    buf.reserve(items.size() * first.size());
    for (auto* it : items) {
      const Tensor& t = it->*member;
      if (t.shape() != first.shape()) throw DimensionError("batch items disagree in shape");
      buf.insert(buf.end(), t.data().begin(), t.data().end());
    }
    return Tensor({items.size() * rows, cols}, std::move(buf));
  };
  b.visual = stack(&Prepared::visual);
  b.fmri = stack(&Prepared::fmri);
  b.text_cls = stack(&Prepared::text_cls);
  b.text_tokens = stack(&Prepared::text_tokens);
  for (auto* it : items) b.valid.insert(b.valid.end(), it->valid.begin(), it->valid.end());
  return b;
}

// ---- forward ----

Forward forward(const enc::ParamVars& pv, const Batch& b, const ModelConfig& cfg, std::size_t k,
                const loss::LossConfig& lc) {
  auto& g = pv.graph();
  std::size_t B = b.size, n = cfg.enc.context;
  auto vis = enc::encode_visual_batch(pv, b.visual, B, cfg.enc);
  auto fm = enc::encode_fmri_batch(pv, b.fmri, B, cfg.enc);
  auto t_cls = g.constant(b.text_cls);
  auto t_tok = g.constant(b.text_tokens);

  auto props = soip::propose_batch(t_cls, pv["soip.W_m"], b.valid, k, true);
  std::vector<std::size_t> rows(B * k);
  for (std::size_t i = 0; i < B * k; ++i) rows[i] = (i / k) * n + props.I[i];
  auto t_soi = ag::gather_rows(t_tok, rows);  // [B*k x d]
  auto p_soi = soir::retrieve_batch(t_soi, vis.tokens, B, cfg.soir_tau);
  auto f_soi = soir::retrieve_batch(t_soi, fm.tokens, B, cfg.soir_tau);

  loss::BatchFeatures bf{t_cls, vis.cls, fm.cls, {}};
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<std::size_t> slot(B), flat(B);
    for (std::size_t i = 0; i < B; ++i) {
      slot[i] = i * k + j;
      flat[i] = i * k + j;
    }
    bf.slots.push_back({ag::take(props.G, flat, {B}), ag::gather_rows(t_soi, slot), ag::gather_rows(p_soi, slot),
                        ag::gather_rows(f_soi, slot)});
  }
  return {loss::total_loss(bf, lc), std::move(props)};
}

Tensor flatten_params(const enc::Params& p) {
  std::vector<double> flat;
  for (const auto& [name, t] : p) flat.insert(flat.end(), t.data().begin(), t.data().end());
  std::size_t n = flat.size();
  return Tensor({n}, std::move(flat));
}

std::function<ag::Var(ag::Graph&, ag::Var)> loss_of_params(const enc::Params& layout, const Batch& b,
                                                           const ModelConfig& cfg, std::size_t k,
                                                           const loss::LossConfig& lc) {
  std::vector<std::pair<std::string, Shape>> shapes;
  for (const auto& [name, t] : layout) shapes.emplace_back(name, t.shape());
  return [shapes, b, cfg, k, lc](ag::Graph& g, ag::Var x) {
    auto col = ag::reshape(x, {x.value().size(), 1});
    std::map<std::string, ag::Var> vars;
    std::size_t off = 0;
    for (const auto& [name, s] : shapes) {
      auto n = shape_size(s);
      vars.emplace(name, ag::reshape(ag::slice_rows(col, off, n), s));
      off += n;
    }
    enc::ParamVars pv(g, std::move(vars));
    return forward(pv, b, cfg, k, lc).loss.total;
  };
}

StepResult train_step(TrainState& st, const Batch& b, const ModelConfig& cfg, const TrainConfig& tc,
                      const loss::LossConfig& lc, std::size_t total_steps) {
  if (b.size == 0) throw ValueError("train_step: empty batch");
  ag::Graph g;
  std::optional<enc::ParamVars> pv;
  Forward fw;
  try {
    pv.emplace(g, st.params, true);
    fw = forward(*pv, b, cfg, tc.k, lc);
  } catch (const ValueError& e) {
    throw ValueError("step " + std::to_string(st.step) + ": forward pass failed: " + e.what());
  }
  StepResult r{fw.loss.total.value()[0], fw.loss.global.value()[0], fw.loss.has_soi ? fw.loss.soi.value()[0] : 0.0};
  if (!std::isfinite(r.global)) throw ValueError("step " + std::to_string(st.step) + ": non-finite global loss L_g");
  if (!std::isfinite(r.soi)) throw ValueError("step " + std::to_string(st.step) + ": non-finite SOI loss L_m");
  if (!std::isfinite(r.loss)) throw ValueError("step " + std::to_string(st.step) + ": non-finite total loss");
  g.backward(fw.loss.total);

  st.lr = scheduled_lr(st.step, total_steps, tc);
  AdamConfig ac{tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay};
  std::size_t t = st.step + 1;
  for (auto& [name, p] : st.params) {
    auto v = (*pv)[name];
    // parameters outside the loss graph (W_m when lambda_m = 0) are left untouched
    if (!g.has_grad(v.id)) continue;
    const auto& grad = g.grad(v.id);
    for (double x : grad.data())
      if (!std::isfinite(x)) throw ValueError("step " + std::to_string(st.step) + ": non-finite gradient for " + name);
    auto& m = st.m.at(name);
    auto& vv = st.v.at(name);
    adamw_update(p, grad, m, vv, t, st.lr, ac);
    if (tc.fp32_storage) {
      io::round_to_f32(p);
      io::round_to_f32(m);
      io::round_to_f32(vv);
    }
  }
  ++st.step;
  return r;
}

// ---- checkpoints ----

void save_checkpoint(const TrainState& st, const fs::path& dir, const ModelConfig& cfg, const TrainConfig& tc,
                     const loss::LossConfig& lc) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  io::NamedTensors all;
  for (const auto& [name, t] : st.params) {
    all.emplace("param." + name, t);
    all.emplace("adam.m." + name, st.m.at(name));
    all.emplace("adam.v." + name, st.v.at(name));
  }
  io::write_archive(dir / "tensors.bin", all);
  json j;
  j["format_version"] = kCheckpointVersion;
  j["step"] = st.step;
  j["lr"] = st.lr;
  j["model"] = config::to_json(cfg);
  j["train"] = config::to_json(tc);
  j["loss"] = config::to_json(lc);
  j["seed"] = tc.seed;
  io::write_text(dir / "manifest.json", j.dump(2) + "\n");
}

namespace {

json read_manifest(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw IoError("no checkpoint at " + dir.string() + " (manifest.json missing)");
  json j;
  try {
    j = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw IoError("checkpoint manifest unreadable: " + std::string(e.what()));
  }
  if (!j.contains("format_version") || j["format_version"] != kCheckpointVersion)
    throw IoError("checkpoint " + dir.string() + ": format version " +
                  (j.contains("format_version") ? j["format_version"].dump() : std::string("missing")) +
                  ", expected " + std::to_string(kCheckpointVersion));
  return j;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  auto j = read_manifest(dir);
  CheckpointInfo info;
  info.model = config::model_from_json(j.at("model"));
  info.train = config::train_from_json(j.at("train"));
  info.loss = config::loss_from_json(j.at("loss"));
  info.step = j.at("step").get<std::size_t>();
  return info;
}

TrainState load_checkpoint(const fs::path& dir, const ModelConfig& expected) {
  auto j = read_manifest(dir);
  auto archive = io::read_archive(dir / "tensors.bin");
  auto reference = init_params(expected, 0);
  TrainState st;
  for (const auto& [name, ref] : reference) {
    for (const char* pre : {"param.", "adam.m.", "adam.v."}) {
      auto it = archive.find(pre + name);
      if (it == archive.end()) throw IoError("checkpoint " + dir.string() + " lacks tensor " + pre + name);
      if (it->second.shape() != ref.shape())
        throw DimensionError("checkpoint tensor " + std::string(pre) + name + " has shape " +
                             shape_str(it->second.shape()) + ", config expects " + shape_str(ref.shape()));
    }
  }
  if (archive.size() != 3 * reference.size())
    throw IoError("checkpoint " + dir.string() + " holds " + std::to_string(archive.size()) +
                  " tensors, config expects " + std::to_string(3 * reference.size()));
  // everything verified; only now populate the state
  for (const auto& [name, ref] : reference) {
    st.params.emplace(name, std::move(archive.at("param." + name)));
    st.m.emplace(name, std::move(archive.at("adam.m." + name)));
    st.v.emplace(name, std::move(archive.at("adam.v." + name)));
  }
  st.step = j.at("step").get<std::size_t>();
  st.lr = j.at("lr").get<double>();
  return st;
}

// ---- evaluation ----

std::vector<Tensor> fmri_tokens(const enc::Params& params, const std::vector<Prepared>& items, const ModelConfig& cfg,
                                unsigned threads) {
  constexpr std::size_t chunk = 32;
  std::size_t n = cfg.enc.num_regions();
  std::vector<Tensor> out(items.size());
  std::size_t chunks = (items.size() + chunk - 1) / chunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    std::size_t lo = c * chunk, hi = std::min(items.size(), lo + chunk);
    std::vector<const Prepared*> part;
    for (std::size_t i = lo; i < hi; ++i) part.push_back(&items[i]);
    auto b = make_batch(part);
    ag::Graph g;
    enc::ParamVars pv(g, params, false);
    auto e = enc::encode_fmri_batch(pv, b.fmri, part.size(), cfg.enc);
    for (std::size_t i = lo; i < hi; ++i) out[i] = e.tokens.value().row_slice((i - lo) * n, n);
  });
  return out;
}

namespace {

double best_constant_mask(const std::vector<const Prepared*>& items) {
  // candidate masks: unions of the observed per-class ground-truth blocks, plus everything
  std::map<std::size_t, std::vector<bool>> blocks;
  std::vector<const std::vector<bool>*> gts;
  for (auto* it : items)
    for (std::size_t i = 0; i < it->present.size(); ++i) {
      blocks.emplace(it->present[i], it->gt_masks[i].bits);
      gts.push_back(&it->gt_masks[i].bits);
    }
  if (gts.empty()) return 0.0;
  std::size_t nv = gts[0]->size();
  std::vector<std::vector<bool>> cands{std::vector<bool>(nv, true)};
  std::vector<const std::vector<bool>*> bl;
  for (const auto& [c, m] : blocks) bl.push_back(&m);
  if (bl.size() <= 12) {
    for (std::size_t s = 1; s < (std::size_t{1} << bl.size()); ++s) {
      std::vector<bool> m(nv, false);
      for (std::size_t c = 0; c < bl.size(); ++c)
        if (s >> c & 1)
          for (std::size_t v = 0; v < nv; ++v) m[v] = m[v] || (*bl[c])[v];
      cands.push_back(std::move(m));
    }
  } else {
    for (auto* b : bl) cands.push_back(*b);
  }
  // distinct gt masks with multiplicities keep the search cheap
  std::map<std::vector<bool>, std::size_t> distinct;
  for (auto* g : gts) ++distinct[*g];
  double best = 0.0;
  for (const auto& m : cands) {
    double acc = 0.0;
    for (const auto& [g, cnt] : distinct) acc += roi::dice(m, g) * static_cast<double>(cnt);
    best = std::max(best, acc / static_cast<double>(gts.size()));
  }
  return best;
}

}  // namespace

EvalMetrics evaluate(const TrainState& st, const std::vector<Prepared>& items, const ModelConfig& cfg,
                     const TrainConfig& tc, const loss::LossConfig& lc, const enc::FlattenMap& map,
                     std::size_t num_classes, const EvalOptions& opt) {
  if (items.empty()) throw ValueError("evaluate: empty validation set");
  opt.localize.validate();
  EvalMetrics r;
  r.gammas = opt.gammas;
  std::size_t G = opt.gammas.size(), k = tc.k;
  const auto& W = st.params.at("soip.W_m");

  // proposals and recall
  std::size_t hits = 0, pairs = 0;
  double chance = 0.0;
  for (const auto& it : items) {
    auto p = soip::propose(it.text_cls, it.text_tokens, it.valid, W, k, true);
    auto nvalid = static_cast<double>(std::count(it.valid.begin(), it.valid.end(), true));
    for (auto pos : it.subject_pos) {
      hits += std::find(p.I.begin(), p.I.end(), pos) != p.I.end();
      chance += std::min(static_cast<double>(k), nvalid) / nvalid;
      ++pairs;
    }
  }
  r.pairs = pairs;
  r.soip_recall = pairs ? static_cast<double>(hits) / static_cast<double>(pairs) : 0.0;
  r.chance_recall = pairs ? chance / static_cast<double>(pairs) : 0.0;

  // localization
  r.mean_dice.assign(G, 0.0);
  std::vector<std::vector<double>> csum(G, std::vector<double>(num_classes, 0.0));
  std::vector<std::size_t> ccount(num_classes, 0);
  auto ftok = opt.oracle ? std::vector<Tensor>{} : fmri_tokens(st.params, items, cfg, opt.threads);
  for (std::size_t s = 0; s < items.size(); ++s) {
    const auto& it = items[s];
    for (std::size_t i = 0; i < it.present.size(); ++i) {
      auto c = it.present[i];
      if (c >= num_classes) throw ValueError("evaluate: class id " + std::to_string(c) + " out of range");
      ++ccount[c];
      const auto& gt = it.gt_masks[i];
      if (opt.oracle) {
        for (std::size_t gi = 0; gi < G; ++gi) {
          double dsc = roi::dice(gt, gt);
          r.mean_dice[gi] += dsc;
          csum[gi][c] += dsc;
        }
        continue;
      }
      auto query = it.text_tokens.row_slice(it.subject_pos[i], 1);
      auto att = roi::attention_map(query, ftok[s], map, opt.localize);
      for (std::size_t gi = 0; gi < G; ++gi) {
        double dsc = roi::dice(roi::threshold_mask(att, opt.gammas[gi]), gt);
        r.mean_dice[gi] += dsc;
        csum[gi][c] += dsc;
      }
    }
  }
  for (std::size_t gi = 0; gi < G; ++gi) {
    r.mean_dice[gi] = pairs ? r.mean_dice[gi] / static_cast<double>(pairs) : 0.0;
    std::vector<double> per(num_classes, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < num_classes; ++c)
      if (ccount[c]) per[c] = csum[gi][c] / static_cast<double>(ccount[c]);
    r.class_dice.push_back(std::move(per));
  }

  if (opt.compute_baseline) {
    std::vector<const Prepared*> ptrs;
    for (const auto& it : items) ptrs.push_back(&it);
    r.baseline_dice = best_constant_mask(ptrs);
  }

  if (opt.compute_loss) {
    std::size_t B = std::min(tc.batch_size, items.size());
    std::size_t nb = items.size() / B;
    double acc = 0.0;
    for (std::size_t bi = 0; bi < nb; ++bi) {
      std::vector<const Prepared*> part;
      for (std::size_t i = bi * B; i < (bi + 1) * B; ++i) part.push_back(&items[i]);
      ag::Graph g;
      enc::ParamVars pv(g, st.params, false);
      acc += forward(pv, make_batch(part), cfg, k, lc).loss.total.value()[0];
    }
    r.val_loss = acc / static_cast<double>(nb);
  }
  return r;
}

// ---- run loop ----

namespace {

std::string fmt_gamma(double g) {
  std::ostringstream s;
  s.precision(2);
  s << std::fixed << g;
  return s.str();
}

json metrics_json(const EvalMetrics& m) {
  json j;
  j["soip_recall"] = m.soip_recall;
  j["chance_recall"] = m.chance_recall;
  j["val_loss"] = m.val_loss;
  j["baseline_dice"] = m.baseline_dice;
  json d = json::object();
  for (std::size_t i = 0; i < m.gammas.size(); ++i) d[fmt_gamma(m.gammas[i])] = m.mean_dice[i];
  j["dice"] = d;
  j["pairs"] = m.pairs;
  return j;
}

}  // namespace

std::vector<std::string> Trainer::run(TrainState& st, const RunOptions& opt) const {
  model.validate();
  train.validate(model);
  loss.validate();
  auto split = data::kfold_split(ds.manifest(), fold);
  if (split.train.size() < train.batch_size)
    throw ConfigError("training fold has " + std::to_string(split.train.size()) + " samples, fewer than batch_size " +
                      std::to_string(train.batch_size));
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };
  auto text = enc::init_text(model.enc);
  log("preparing " + std::to_string(split.train.size()) + " train / " + std::to_string(split.val.size()) +
      " val samples");
  auto tr = prepare(ds, split.train, model, text, opt.threads);
  auto va = prepare(ds, split.val, model, text, opt.threads);

  std::size_t per_epoch = tr.size() / train.batch_size;
  std::size_t total = per_epoch * train.epochs;
  std::size_t stop = opt.max_steps ? std::min(total, opt.max_steps) : total;
  if (st.step > total) throw ConfigError("checkpoint step " + std::to_string(st.step) + " beyond schedule end");

  std::vector<std::string> lines;
  fs::path ckdir = opt.run_dir.empty() ? fs::path{} : opt.run_dir / "checkpoints";
  double epoch_loss = 0.0;
  std::size_t epoch_steps = 0;
  while (st.step < stop) {
    std::size_t epoch = st.step / per_epoch, off = st.step % per_epoch;
    std::vector<std::size_t> order(tr.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(train.seed, 0xE90C0000ULL + epoch));
    rng.shuffle(order);
    if (off == 0) {
      epoch_loss = 0.0;
      epoch_steps = 0;
    }
    for (std::size_t bi = off; bi < per_epoch && st.step < stop; ++bi) {
      std::vector<const Prepared*> part;
      for (std::size_t i = bi * train.batch_size; i < (bi + 1) * train.batch_size; ++i) part.push_back(&tr[order[i]]);
      auto r = train_step(st, make_batch(part), model, train, loss, total);
      epoch_loss += r.loss;
      ++epoch_steps;
    }
    if (st.step % per_epoch != 0) break;  // stopped mid-epoch
    std::size_t done = st.step / per_epoch;
    log("epoch " + std::to_string(done) + "/" + std::to_string(train.epochs) + " train loss " +
        std::to_string(epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_steps, 1))));
    bool last = done == train.epochs;
    if (last || (train.eval_every && done % train.eval_every == 0)) {
      auto m = evaluate(st, va, model, train, loss, ds.flatten_map(), ds.manifest().cfg.num_classes, eval);
      json j = metrics_json(m);
      j["event"] = "eval";
      j["epoch"] = done;
      j["step"] = st.step;
      j["lr"] = st.lr;
      j["train_loss"] = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
      auto line = j.dump();
      lines.push_back(line);
      log(line);
      if (!opt.run_dir.empty()) {
        std::ofstream f(opt.run_dir / "metrics.jsonl", std::ios::app);
        f << line << "\n";
        save_checkpoint(st, ckdir / ("step_" + std::to_string(st.step)), model, train, loss);
      }
    }
  }
  if (!opt.run_dir.empty()) save_checkpoint(st, ckdir / "final", model, train, loss);
  return lines;
}

}  // namespace bractive::train
