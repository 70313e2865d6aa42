// SPDX-License-Identifier: Apache-2.0
#include "bractive/encoders.hpp"

#include <cmath>

#include "bractive/random.hpp"
#include "json.hpp"

namespace bractive::enc {

using json = nlohmann::json;

void EncoderConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(d > 0 && layers > 0 && heads > 0 && mlp_ratio > 0, "model dims must be positive");
  need(d % heads == 0, "d must be divisible by heads");
  need(patch > 0 && image_h % patch == 0 && image_w % patch == 0, "image dims must be divisible by patch size");
  need(channels > 0, "channels must be positive");
  need(fmri_patch > 0 && fmri_h % fmri_patch == 0 && fmri_w % fmri_patch == 0,
       "fmri grid dims must be divisible by fmri_patch");
  need(context > 0 && vocab > 1, "context and vocab must be positive");
}

// ---- FlattenMap ----

FlattenMap::FlattenMap(std::size_t h, std::size_t w, std::vector<Cell> voxel_to_cell)
    : h_(h), w_(w), cells_(std::move(voxel_to_cell)), inverse_(h * w, -1) {
  if (h == 0 || w == 0) throw DimensionError("flatten map grid must be non-empty");
  if (cells_.empty()) throw DimensionError("flatten map must cover at least one voxel");
  for (std::size_t v = 0; v < cells_.size(); ++v) {
    const auto& c = cells_[v];
    if (c.row >= h || c.col >= w)
      throw DimensionError("flatten map voxel " + std::to_string(v) + " lies outside the grid");
    auto& slot = inverse_[c.row * w + c.col];
    if (slot >= 0)
      throw ValueError("flatten map is not injective: voxels " + std::to_string(slot) + " and " + std::to_string(v) +
                       " share a cell");
    slot = static_cast<long>(v);
  }
}

FlattenMap FlattenMap::identity(std::size_t h, std::size_t w) {
  std::vector<Cell> cells;
  cells.reserve(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) cells.push_back({r, c});
  return FlattenMap(h, w, std::move(cells));
}

std::optional<std::size_t> FlattenMap::voxel_at(std::size_t row, std::size_t col) const {
  if (row >= h_ || col >= w_) return std::nullopt;
  auto v = inverse_[row * w_ + col];
  if (v < 0) return std::nullopt;
  return static_cast<std::size_t>(v);
}

Tensor FlattenMap::flatten(const Tensor& voxels) const {
  if (voxels.size() != cells_.size())
    throw DimensionError("flatten: got " + std::to_string(voxels.size()) + " voxels, map covers " +
                         std::to_string(cells_.size()));
  Tensor g({h_, w_}, 0.0);
  for (std::size_t v = 0; v < cells_.size(); ++v) g[cells_[v].row * w_ + cells_[v].col] = voxels[v];
  return g;
}

Tensor FlattenMap::unflatten(const Tensor& grid) const {
  if (grid.size() != h_ * w_)
    throw DimensionError("unflatten: grid " + shape_str(grid.shape()) + " does not match map " + std::to_string(h_) +
                         "x" + std::to_string(w_));
  Tensor v({cells_.size()});
  for (std::size_t i = 0; i < cells_.size(); ++i) v[i] = grid[cells_[i].row * w_ + cells_[i].col];
  return v;
}

std::string FlattenMap::to_json() const {
  json j;
  j["h_2d"] = h_;
  j["w_2d"] = w_;
  json table = json::array();
  for (const auto& c : cells_) table.push_back({c.row, c.col});
  j["voxel_to_cell"] = table;
  return j.dump();
}

FlattenMap FlattenMap::from_json(const std::string& text) {
  try {
    auto j = json::parse(text);
    std::vector<Cell> cells;
    for (const auto& e : j.at("voxel_to_cell")) {
      if (!e.is_array() || e.size() != 2) throw IoError("flatten map entries must be [row, col] pairs");
      cells.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>()});
    }
    return FlattenMap(j.at("h_2d").get<std::size_t>(), j.at("w_2d").get<std::size_t>(), std::move(cells));
  } catch (const json::exception& e) {
    throw IoError(std::string("invalid flatten map: ") + e.what());
  }
}

void FlattenMap::save(const std::filesystem::path& p) const { io::write_text(p, to_json()); }

FlattenMap FlattenMap::load(const std::filesystem::path& p) { return from_json(io::read_text(p)); }

// ---- patches ----

Tensor patchify(const ImageSample& img, std::size_t p) {
  if (p == 0 || img.h % p != 0 || img.w % p != 0)
    throw DimensionError("patchify: image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                         " not divisible by patch " + std::to_string(p));
  if (img.pixels.size() != img.h * img.w * img.c) throw DimensionError("patchify: pixel buffer size mismatch");
  std::size_t gh = img.h / p, gw = img.w / p, len = p * p * img.c;
  Tensor out({gh * gw, len});
  for (std::size_t pr = 0; pr < gh; ++pr)
    for (std::size_t pc = 0; pc < gw; ++pc) {
      double* dst = out.ptr() + (pr * gw + pc) * len;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < img.c; ++c)
            *dst++ = img.pixels[((pr * p + y) * img.w + pc * p + x) * img.c + c];
    }
  return out;
}

Tensor patchify_grid(const Tensor& grid, std::size_t p) {
  if (grid.rank() != 2) throw DimensionError("patchify_grid: expected a 2-d grid");
  ImageSample img{grid.dim(0), grid.dim(1), 1, grid};
  return patchify(img, p);
}

Tensor flatten_fmri(const FmriSample& f, const FlattenMap& map) { return map.flatten(f.voxels); }

// ---- parameters ----

ParamVars::ParamVars(ag::Graph& g, const Params& params, bool trainable) : g_(&g) {
  for (const auto& [name, t] : params) vars_.emplace(name, trainable ? g.leaf(t) : g.constant(t));
}

ag::Var ParamVars::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw InvariantError("missing parameter " + name);
  return it->second;
}

namespace {

struct Init {
  Rng rng;
  double weight_std;
  double embed_std;
  bool scaled;  // weight std 1/sqrt(fan_in) instead of a constant

  Tensor draw(Shape s, double std) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = rng.trunc_normal(std);
    return t;
  }
  Tensor weight(std::size_t in, std::size_t out) {
    return draw({in, out}, scaled ? 1.0 / std::sqrt(static_cast<double>(in)) : weight_std);
  }
};

void init_trunk(Params& p, const std::string& pre, std::size_t n, const EncoderConfig& cfg, Init& in) {
  std::size_t d = cfg.d, hid = cfg.d * cfg.mlp_ratio;
  p[pre + ".cls"] = in.draw({1, d}, in.embed_std);
  p[pre + ".pos"] = in.draw({n + 1, d}, in.embed_std);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto b = pre + ".block" + std::to_string(l);
    p[b + ".ln1.g"] = Tensor({d}, 1.0);
    p[b + ".ln1.b"] = Tensor({d}, 0.0);
    p[b + ".qkv.w"] = in.weight(d, 3 * d);
    p[b + ".qkv.b"] = Tensor({3 * d}, 0.0);
    p[b + ".proj.w"] = in.weight(d, d);
    p[b + ".proj.b"] = Tensor({d}, 0.0);
    p[b + ".ln2.g"] = Tensor({d}, 1.0);
    p[b + ".ln2.b"] = Tensor({d}, 0.0);
    p[b + ".fc1.w"] = in.weight(d, hid);
    p[b + ".fc1.b"] = Tensor({hid}, 0.0);
    p[b + ".fc2.w"] = in.weight(hid, d);
    p[b + ".fc2.b"] = Tensor({d}, 0.0);
  }
  p[pre + ".ln.g"] = Tensor({d}, 1.0);
  p[pre + ".ln.b"] = Tensor({d}, 0.0);
}

}  // namespace

void init_visual(Params& p, const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Init in{Rng(mix_seed(seed, 101)), 0.02, 0.02, false};
  p["visual.embed.w"] = in.weight(cfg.patch_dim(), cfg.d);
  p["visual.embed.b"] = Tensor({cfg.d}, 0.0);
  init_trunk(p, "visual", cfg.num_patches(), cfg, in);
}

void init_fmri(Params& p, const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Init in{Rng(mix_seed(seed, 202)), 0.02, 0.02, false};
  p["fmri.embed.w"] = in.weight(cfg.fmri_patch_dim(), cfg.d);
  p["fmri.embed.b"] = Tensor({cfg.d}, 0.0);
  init_trunk(p, "fmri", cfg.num_regions(), cfg, in);
}

Params init_text(const EncoderConfig& cfg) {
  cfg.validate();
  // a frozen random net needs O(1) activations to be discriminative, so its
  // tables are unit-scale and its projections fan-in scaled
  Init in{Rng(mix_seed(cfg.seed, 303)), 0.0, 1.0, true};
  Params p;
  p["text.embed"] = in.draw({cfg.vocab, cfg.d}, 1.0);
  init_trunk(p, "text", cfg.context, cfg, in);
  return p;
}

BatchEncoding run_encoder(const ParamVars& pv, const std::string& pre, ag::Var embedded, std::size_t batch,
                          std::size_t n, const EncoderConfig& cfg, const std::vector<bool>* valid) {
  if (embedded.value().rank() != 2 || embedded.value().dim(0) != batch * n || embedded.value().dim(1) != cfg.d)
    throw DimensionError(pre + " encoder: embedded input " + shape_str(embedded.value().shape()) + " expected [" +
                         std::to_string(batch * n) + "x" + std::to_string(cfg.d) + "]");
  std::size_t T = n + 1;
  std::vector<bool> keys;
  if (valid) {
    if (valid->size() != batch * n) throw DimensionError(pre + " encoder: mask length mismatch");
    keys.reserve(batch * T);
    for (std::size_t b = 0; b < batch; ++b) {
      keys.push_back(true);
      for (std::size_t i = 0; i < n; ++i) keys.push_back((*valid)[b * n + i]);
    }
  }
  auto x = ag::prepend_rows(pv[pre + ".cls"], embedded, batch);
  x = ag::add_tiled(x, pv[pre + ".pos"]);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto b = pre + ".block" + std::to_string(l);
    auto h = ag::layer_norm(x, pv[b + ".ln1.g"], pv[b + ".ln1.b"]);
    auto qkv = ag::linear(h, pv[b + ".qkv.w"], pv[b + ".qkv.b"]);
    auto a = ag::attention(qkv, batch, T, cfg.heads, valid ? &keys : nullptr);
    x = ag::add(x, ag::linear(a, pv[b + ".proj.w"], pv[b + ".proj.b"]));
    h = ag::layer_norm(x, pv[b + ".ln2.g"], pv[b + ".ln2.b"]);
    h = ag::gelu(ag::linear(h, pv[b + ".fc1.w"], pv[b + ".fc1.b"]));
    x = ag::add(x, ag::linear(h, pv[b + ".fc2.w"], pv[b + ".fc2.b"]));
  }
  x = ag::layer_norm(x, pv[pre + ".ln.g"], pv[pre + ".ln.b"]);
  std::vector<std::size_t> cls_rows, tok_rows;
  for (std::size_t b = 0; b < batch; ++b) {
    cls_rows.push_back(b * T);
    for (std::size_t i = 1; i < T; ++i) tok_rows.push_back(b * T + i);
  }
  return {ag::gather_rows(x, cls_rows), ag::gather_rows(x, tok_rows), batch, n};
}

BatchEncoding encode_visual_batch(const ParamVars& pv, const Tensor& patches, std::size_t batch,
                                  const EncoderConfig& cfg) {
  std::size_t n = cfg.num_patches();
  if (patches.rank() != 2 || patches.dim(0) != batch * n || patches.dim(1) != cfg.patch_dim())
    throw DimensionError("encode_visual: patches " + shape_str(patches.shape()) + " expected [" +
                         std::to_string(batch * n) + "x" + std::to_string(cfg.patch_dim()) + "]");
  auto& g = pv.graph();
  auto e = ag::linear(g.constant(patches), pv["visual.embed.w"], pv["visual.embed.b"]);
  return run_encoder(pv, "visual", e, batch, n, cfg);
}

BatchEncoding encode_fmri_batch(const ParamVars& pv, const Tensor& patches, std::size_t batch,
                                const EncoderConfig& cfg) {
  std::size_t n = cfg.num_regions();
  if (patches.rank() != 2 || patches.dim(0) != batch * n || patches.dim(1) != cfg.fmri_patch_dim())
    throw DimensionError("encode_fmri: patches " + shape_str(patches.shape()) + " expected [" +
                         std::to_string(batch * n) + "x" + std::to_string(cfg.fmri_patch_dim()) + "]");
  auto& g = pv.graph();
  auto e = ag::linear(g.constant(patches), pv["fmri.embed.w"], pv["fmri.embed.b"]);
  return run_encoder(pv, "fmri", e, batch, n, cfg);
}

void check_token_sequence(const TokenSequence& t, const EncoderConfig& cfg) {
  if (t.ids.size() != cfg.context || t.valid.size() != cfg.context)
    throw DimensionError("token sequence length " + std::to_string(t.ids.size()) + " != context " +
                         std::to_string(cfg.context));
  bool tail = false;
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    if (t.ids[i] >= cfg.vocab)
      throw ValueError("token id " + std::to_string(t.ids[i]) + " >= vocab " + std::to_string(cfg.vocab));
    if (!t.valid[i]) tail = true;
    else if (tail) throw ValueError("valid mask must be a prefix");
  }
}

TextBatch encode_text_batch(const std::vector<TokenSequence>& seqs, const Params& text, const EncoderConfig& cfg) {
  if (seqs.empty()) throw DimensionError("encode_text: empty batch");
  std::size_t B = seqs.size(), n = cfg.context, d = cfg.d;
  const auto& table = text.at("text.embed");
  if (table.dim(0) != cfg.vocab || table.dim(1) != d) throw DimensionError("text embedding table does not match config");
  Tensor emb({B * n, d});
  std::vector<bool> valid;
  valid.reserve(B * n);
  for (std::size_t b = 0; b < B; ++b) {
    check_token_sequence(seqs[b], cfg);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(table.ptr() + seqs[b].ids[i] * d, d, emb.ptr() + (b * n + i) * d);
      valid.push_back(seqs[b].valid[i]);
    }
  }
  ag::Graph g;
  ParamVars pv(g, text, false);
  auto enc = run_encoder(pv, "text", g.constant(std::move(emb)), B, n, cfg, &valid);
  return {enc.cls.value(), enc.tokens.value(), std::move(valid)};
}

EncodedSequence encode_visual(const Tensor& patches, const Params& params, const EncoderConfig& cfg) {
  ag::Graph g;
  ParamVars pv(g, params, false);
  auto e = encode_visual_batch(pv, patches, 1, cfg);
  return {e.cls.value().reshaped({cfg.d}), e.tokens.value(), {}};
}

EncodedSequence encode_fmri(const Tensor& grid, const Params& params, const EncoderConfig& cfg) {
  if (grid.rank() != 2 || grid.dim(0) != cfg.fmri_h || grid.dim(1) != cfg.fmri_w)
    throw DimensionError("encode_fmri: grid " + shape_str(grid.shape()) + " does not match config");
  ag::Graph g;
  ParamVars pv(g, params, false);
  auto e = encode_fmri_batch(pv, patchify_grid(grid, cfg.fmri_patch), 1, cfg);
  return {e.cls.value().reshaped({cfg.d}), e.tokens.value(), {}};
}

EncodedSequence encode_text(const TokenSequence& t, const Params& text, const EncoderConfig& cfg) {
  auto b = encode_text_batch({t}, text, cfg);
  return {b.cls.reshaped({cfg.d}), b.tokens, b.valid};
}

}  // namespace bractive::enc
