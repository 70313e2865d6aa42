// SPDX-License-Identifier: Apache-2.0
// bractive: corpus generation, training, ROI evaluation, map export, self checks.
//
// Config precedence: command-line flags > --config file > built-in defaults.
// Exit codes: 0 success, 1 user error, 2 internal invariant violation.

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "bractive/config.hpp"
#include "bractive/ops.hpp"
#include "bractive/self_check.hpp"
#include "bractive/soir.hpp"
#include "bractive/training.hpp"

using namespace bractive;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

unsigned default_threads() {
  if (const char* e = std::getenv("BRACTIVE_THREADS")) {
    int v = std::atoi(e);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return 1;
}

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  unsigned threads = default_threads();
  bool deterministic = false;
};

void add_common(CLI::App* c, Common& o) {
  c->add_option("--config", o.config_file, "JSON run config (sections data, model, train, loss, localize)");
  c->add_option("--set", o.overrides, "override one value, e.g. --set train.epochs=2 (repeatable)");
  c->add_option("--threads", o.threads, "worker threads (default $BRACTIVE_THREADS or 1)");
  c->add_flag("--deterministic", o.deterministic, "serial execution");
}

config::RunConfig resolve(const Common& o) {
  config::RunConfig c;
  if (!o.config_file.empty()) c = config::load(o.config_file);
  for (const auto& s : o.overrides) config::apply_override(c, s);
  return c;
}

void echo(const std::string& cmd, const json& j) {
  std::cout << "[" << cmd << "] resolved config:\n" << j.dump(2) << "\n";
}

std::string fixed(double v, int p = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(p) << v;
  return s.str();
}

unsigned effective_threads(const Common& o) { return o.deterministic ? 1u : std::max(1u, o.threads); }

// ---- gen-data ----

struct GenOpts {
  Common common;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples, classes;
};

int cmd_gen_data(const GenOpts& o) {
  auto c = resolve(o.common);
  if (o.seed) c.data.seed = *o.seed;
  if (o.samples) c.data.num_samples = *o.samples;
  if (o.classes) c.data.num_classes = *o.classes;
  c.data.validate();
  config::sync_model_to_data(c);
  echo("gen-data", json{{"data", config::to_json(c.data)}});
  auto m = data::gen_dataset(c.data, o.out, effective_threads(o.common));
  std::vector<std::size_t> per_class(c.data.num_classes, 0), per_fold(c.data.folds, 0);
  for (const auto& s : m.samples) {
    for (auto k : s.present) ++per_class[k];
    ++per_fold[s.fold];
  }
  std::cout << "wrote " << m.samples.size() << " samples to " << o.out << "\n";
  std::cout << "classes:";
  for (std::size_t k = 0; k < per_class.size(); ++k) std::cout << " " << k << ":" << per_class[k];
  std::cout << "\nfolds:";
  for (std::size_t f = 0; f < per_fold.size(); ++f) std::cout << " " << f << ":" << per_fold[f];
  std::cout << "\ndigest " << std::hex << io::directory_digest(o.out) << std::dec << "\n";
  return 0;
}

// ---- train ----

struct TrainOpts {
  Common common;
  std::string data, out, resume;
  std::size_t fold = 0;
  std::optional<std::size_t> epochs, batch, max_steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainOpts& o) {
  auto c = resolve(o.common);
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.batch) c.train.batch_size = *o.batch;
  if (o.lr) c.train.base_lr = *o.lr;
  if (o.seed) c.train.seed = *o.seed;
  auto ds = data::Dataset::load(o.data);
  if (o.fold >= ds.manifest().cfg.folds)
    throw ConfigError("fold must be 0.." + std::to_string(ds.manifest().cfg.folds - 1));
  // the corpus fixes the data section and the dims derived from it
  c.data = ds.manifest().cfg;
  config::sync_model_to_data(c);
  c.validate();
  auto resolved = config::to_json(c);
  echo("train", resolved);

  fs::path run = o.out;
  fs::create_directories(run / "checkpoints");
  fs::create_directories(run / "reports");
  io::write_text(run / "config.json", resolved.dump(2) + "\n");

  train::TrainState st;
  if (!o.resume.empty()) {
    st = train::load_checkpoint(o.resume, c.model);
    std::cout << "resumed from " << o.resume << " at step " << st.step << "\n";
  } else {
    st = train::init_state(c.model, c.train);
    std::ofstream(run / "metrics.jsonl", std::ios::trunc);
  }
  train::Trainer tr{ds, c.model, c.train, c.loss, {}, o.fold};
  tr.eval.localize = c.localize;
  tr.eval.threads = effective_threads(o.common);
  train::RunOptions ro;
  ro.run_dir = run;
  ro.threads = effective_threads(o.common);
  ro.max_steps = o.max_steps.value_or(0);
  ro.log = [](const std::string& s) { std::cout << s << std::endl; };
  tr.run(st, ro);
  std::cout << "final checkpoint " << (run / "checkpoints" / "final").string() << " step " << st.step << "\n";
  return 0;
}

// ---- eval-roi ----

struct EvalOpts {
  Common common;
  std::string checkpoint, data, out;
  std::size_t fold = 0;
  std::optional<double> gamma;
  bool sweep = false, oracle = false;
};

fs::path default_reports(const fs::path& ckpt) {
  auto parent = fs::absolute(ckpt).parent_path();
  if (parent.filename() == "checkpoints") return parent.parent_path() / "reports";
  return fs::path("reports");
}

int cmd_eval_roi(const EvalOpts& o) {
  if (o.sweep == o.gamma.has_value()) throw ConfigError("eval-roi needs exactly one of --gamma or --sweep");
  auto info = train::read_checkpoint_info(o.checkpoint);
  auto ds = data::Dataset::load(o.data);
  data::check_compatible(ds.manifest().cfg, info.model.enc);
  if (o.fold >= ds.manifest().cfg.folds)
    throw ConfigError("fold must be 0.." + std::to_string(ds.manifest().cfg.folds - 1));
  auto c = resolve(o.common);
  c.localize.s = info.model.enc.fmri_patch;
  if (o.gamma) c.localize.gamma = *o.gamma;
  c.localize.validate();
  echo("eval-roi", json{{"model", config::to_json(info.model)},
                        {"train", config::to_json(info.train)},
                        {"loss", config::to_json(info.loss)},
                        {"localize", config::to_json(c.localize)},
                        {"checkpoint", o.checkpoint},
                        {"fold", o.fold},
                        {"oracle", o.oracle}});
  auto st = train::load_checkpoint(o.checkpoint, info.model);
  auto split = data::kfold_split(ds.manifest(), o.fold);
  auto text = enc::init_text(info.model.enc);
  unsigned th = effective_threads(o.common);
  std::size_t C = ds.manifest().cfg.num_classes;

  train::EvalOptions eo;
  eo.localize = c.localize;
  eo.oracle = o.oracle;
  eo.compute_loss = false;
  eo.threads = th;
  fs::path reports = o.out.empty() ? default_reports(o.checkpoint) : fs::path(o.out);
  fs::create_directories(reports);
  auto val = train::prepare(ds, split.val, info.model, text, th);

  if (o.sweep) {
    auto trn = train::prepare(ds, split.train, info.model, text, th);
    eo.compute_baseline = false;
    auto mt = train::evaluate(st, trn, info.model, info.train, info.loss, ds.flatten_map(), C, eo);
    eo.compute_baseline = true;
    auto mv = train::evaluate(st, val, info.model, info.train, info.loss, ds.flatten_map(), C, eo);
    std::size_t best = 0;
    for (std::size_t i = 1; i < mt.gammas.size(); ++i)
      if (mt.mean_dice[i] > mt.mean_dice[best]) best = i;
    std::ostringstream csv;
    csv << "gamma,train_dice,val_dice\n";
    std::cout << "gamma  train_dice  val_dice\n";
    for (std::size_t i = 0; i < mt.gammas.size(); ++i) {
      csv << fixed(mt.gammas[i], 1) << "," << fixed(mt.mean_dice[i], 6) << "," << fixed(mv.mean_dice[i], 6) << "\n";
      std::cout << fixed(mt.gammas[i], 1) << "    " << fixed(mt.mean_dice[i]) << "      " << fixed(mv.mean_dice[i])
                << "\n";
    }
    io::write_text(reports / "dice_sweep.csv", csv.str());
    std::cout << "selected gamma " << fixed(mt.gammas[best], 1) << " (train fold) -> val dice "
              << fixed(mv.mean_dice[best]) << "; best constant mask " << fixed(mv.baseline_dice) << "\n";
    std::cout << "soip recall " << fixed(mv.soip_recall) << " (chance " << fixed(mv.chance_recall) << ")\n";
    std::cout << "report " << (reports / "dice_sweep.csv").string() << "\n";
    return 0;
  }

  eo.gammas = {c.localize.gamma};
  auto mv = train::evaluate(st, val, info.model, info.train, info.loss, ds.flatten_map(), C, eo);
  std::ostringstream csv;
  csv << "class,dice\n";
  for (std::size_t k = 0; k < C; ++k) {
    double v = mv.class_dice[0][k];
    csv << k << "," << (std::isnan(v) ? std::string("nan") : fixed(v, 6)) << "\n";
    std::cout << "class " << k << "  dice " << (std::isnan(v) ? std::string("n/a") : fixed(v)) << "\n";
  }
  csv << "mean," << fixed(mv.mean_dice[0], 6) << "\n";
  io::write_text(reports / "dice.csv", csv.str());
  std::cout << "mean dice " << fixed(mv.mean_dice[0]) << " at gamma " << fixed(c.localize.gamma, 2)
            << "; best constant mask " << fixed(mv.baseline_dice) << "\n";
  std::cout << "soip recall " << fixed(mv.soip_recall) << " (chance " << fixed(mv.chance_recall) << ")\n";
  std::cout << "report " << (reports / "dice.csv").string() << "\n";
  return 0;
}

// ---- localize ----

struct LocalizeOpts {
  Common common;
  std::string checkpoint, data, out, query = "text";
  std::size_t sample = 0, cls = 0;
  std::optional<double> gamma;
};

int cmd_localize(const LocalizeOpts& o) {
  if (o.query != "text" && o.query != "visual") throw ConfigError("--query must be text or visual");
  auto info = train::read_checkpoint_info(o.checkpoint);
  auto ds = data::Dataset::load(o.data);
  data::check_compatible(ds.manifest().cfg, info.model.enc);
  const auto& mcfg = ds.manifest().cfg;
  if (o.sample >= ds.size()) throw ConfigError("--sample must be below " + std::to_string(ds.size()));
  if (o.cls >= mcfg.num_classes) throw ConfigError("--class must be below " + std::to_string(mcfg.num_classes));
  auto c = resolve(o.common);
  c.localize.s = info.model.enc.fmri_patch;
  if (o.gamma) c.localize.gamma = *o.gamma;
  c.localize.validate();
  echo("localize", json{{"model", config::to_json(info.model)},
                        {"localize", config::to_json(c.localize)},
                        {"checkpoint", o.checkpoint},
                        {"sample", o.sample},
                        {"class", o.cls},
                        {"query", o.query}});
  auto st = train::load_checkpoint(o.checkpoint, info.model);
  const auto& e = info.model.enc;
  auto text = enc::init_text(e);
  auto s = ds.sample(o.sample);
  auto token = ds.manifest().classes.at(o.cls).token;

  // T_sk: the class token's feature in this caption, or in a one-token caption when absent
  Tensor query;
  auto it = std::find(s.caption.ids.begin(), s.caption.ids.end(), token);
  if (it != s.caption.ids.end()) {
    auto enc_t = enc::encode_text(s.caption, text, e);
    query = enc_t.tokens.row_slice(static_cast<std::size_t>(it - s.caption.ids.begin()), 1);
  } else {
    std::cerr << "warning: class " << o.cls << " is not present in sample " << o.sample
              << "; using the class token on its own as the query\n";
    enc::TokenSequence t{std::vector<std::size_t>(e.context, data::kPadToken), std::vector<bool>(e.context, false)};
    t.ids[0] = token;
    t.valid[0] = true;
    query = enc::encode_text(t, text, e).tokens.row_slice(0, 1);
  }

  auto fm = enc::encode_fmri(enc::flatten_fmri(s.fmri, ds.flatten_map()), st.params, e);
  fs::path out = o.out;
  fs::create_directories(out);
  if (o.query == "visual") {
    auto vis = enc::encode_visual(enc::patchify(s.image, e.patch), st.params, e);
    auto img = roi::visual_attention_map(query, vis.tokens, e.image_h, e.image_w, e.patch, c.localize.mode);
    roi::write_pgm(out / "visual_image_map.pgm", img.values);
    roi::write_map_csv(out / "visual_image_map.csv", img);
    // the retrieved visual subject feature stands in for the text query
    query = soir::retrieve(query, vis.tokens, info.model.soir_tau).feature.reshaped({1, e.d});
  }
  auto att = roi::attention_map(query, fm.tokens, ds.flatten_map(), c.localize);
  att.query = o.query;
  auto mask = roi::threshold_mask(att, c.localize.gamma);
  auto pre = o.query + "_";
  roi::write_pgm(out / (pre + "fmri_map.pgm"), roi::render_voxels(att.values, ds.flatten_map()));
  roi::write_map_csv(out / (pre + "fmri_map.csv"), att);
  roi::write_mask_csv(out / (pre + "mask.csv"), mask);
  std::cout << "wrote " << (out / (pre + "fmri_map.pgm")).string() << " (" << ds.flatten_map().height() << "x"
            << ds.flatten_map().width() << "), mask of " << mask.count() << " voxels";
  auto pit = std::find(s.present.begin(), s.present.end(), o.cls);
  if (pit != s.present.end())
    std::cout << ", dice vs ground truth " << fixed(roi::dice(mask, s.gt_masks[pit - s.present.begin()]));
  std::cout << "\n";
  return 0;
}

// ---- self-check ----

int cmd_self_check(bool inject, unsigned instances) {
  echo("self-check", json{{"inject_fault", inject}, {"instances", instances}});
  auto results = check::self_check(inject, instances);
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "\n";
    failed += !r.pass;
  }
  std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  num::set_blas_threads(1);
  CLI::App app{"bractive: tri-modal alignment and fMRI region localization"};
  app.require_subcommand(1);

  GenOpts gen;
  auto* g = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_common(g, gen.common);
  g->add_option("--out", gen.out, "corpus directory")->required();
  g->add_option("--seed", gen.seed, "data.seed");
  g->add_option("--samples", gen.samples, "data.num_samples");
  g->add_option("--classes", gen.classes, "data.num_classes");

  TrainOpts trn;
  auto* t = app.add_subcommand("train", "train on one fold");
  add_common(t, trn.common);
  t->add_option("--data", trn.data, "corpus directory")->required();
  t->add_option("--out", trn.out, "run directory")->required();
  t->add_option("--fold", trn.fold, "validation fold");
  t->add_option("--resume", trn.resume, "checkpoint directory to resume from");
  t->add_option("--epochs", trn.epochs, "train.epochs");
  t->add_option("--batch", trn.batch, "train.batch_size");
  t->add_option("--lr", trn.lr, "train.base_lr");
  t->add_option("--seed", trn.seed, "train.seed");
  t->add_option("--max-steps", trn.max_steps, "stop after this many optimizer steps");

  EvalOpts ev;
  auto* e = app.add_subcommand("eval-roi", "dice evaluation of ROI localization");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")->required();
  e->add_option("--data", ev.data, "corpus directory")->required();
  e->add_option("--fold", ev.fold, "validation fold");
  e->add_option("--gamma", ev.gamma, "threshold");
  e->add_flag("--sweep", ev.sweep, "sweep gamma 0.1..0.9 on the training fold, report validation");
  e->add_flag("--oracle", ev.oracle, "use ground-truth masks as predictions (pipeline sanity)");
  e->add_option("--out", ev.out, "report directory");

  LocalizeOpts lo;
  auto* l = app.add_subcommand("localize", "export an attention map and mask for one sample");
  add_common(l, lo.common);
  l->add_option("--checkpoint", lo.checkpoint, "checkpoint directory")->required();
  l->add_option("--data", lo.data, "corpus directory")->required();
  l->add_option("--sample", lo.sample, "sample id")->required();
  l->add_option("--class", lo.cls, "class id")->required();
  l->add_option("--query", lo.query, "text or visual");
  l->add_option("--gamma", lo.gamma, "threshold");
  l->add_option("--out", lo.out, "output directory")->required();

  bool inject = false;
  unsigned instances = 3;
  auto* sc = app.add_subcommand("self-check", "gradient checks, loss oracles, round trips");
  sc->add_flag("--inject-fault", inject, "corrupt one backward rule; the run must fail");
  sc->add_option("--instances", instances, "random instances per op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int rc = app.exit(err);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(trn);
    if (e->parsed()) return cmd_eval_roi(ev);
    if (l->parsed()) return cmd_localize(lo);
    if (sc->parsed()) return cmd_self_check(inject, instances);
  } catch (const InvariantError& err) {
    std::cerr << "internal error: " << err.what() << "\n";
    return 2;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "internal error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
