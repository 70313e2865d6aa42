// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bractive/autograd.hpp"
#include "bractive/tensor.hpp"
#include "bractive/tensor_io.hpp"

namespace bractive::enc {

struct EncoderConfig {
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t image_h = 32, image_w = 32, channels = 3;
  std::size_t patch = 8;  // p
  std::size_t fmri_h = 32, fmri_w = 32;
  std::size_t fmri_patch = 8;  // p_f
  std::size_t context = 16;  // N_c
  std::size_t vocab = 32;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t num_patches() const { return (image_h / patch) * (image_w / patch); }
  std::size_t num_regions() const { return (fmri_h / fmri_patch) * (fmri_w / fmri_patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t fmri_patch_dim() const { return fmri_patch * fmri_patch; }
};

struct ImageSample {
  std::size_t h = 0, w = 0, c = 0;
  Tensor pixels;  // [h x w x c], values in [0, 1]
};

struct FmriSample {
  Tensor voxels;  // [N_F]
};

struct TokenSequence {
  std::vector<std::size_t> ids;  // length N_c, 0 = pad
  std::vector<bool> valid;       // true on a prefix
};

struct EncodedSequence {
  Tensor cls;     // [d]
  Tensor tokens;  // [N x d]
  std::vector<bool> valid;
};

class FlattenMap {
 public:
  struct Cell {
    std::size_t row = 0, col = 0;
    bool operator==(const Cell&) const = default;
  };

  FlattenMap(std::size_t h, std::size_t w, std::vector<Cell> voxel_to_cell);
  static FlattenMap identity(std::size_t h, std::size_t w);

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t num_voxels() const { return cells_.size(); }
  const Cell& cell(std::size_t voxel) const { return cells_.at(voxel); }
  std::optional<std::size_t> voxel_at(std::size_t row, std::size_t col) const;
  bool covered(std::size_t row, std::size_t col) const { return voxel_at(row, col).has_value(); }

  Tensor flatten(const Tensor& voxels) const;  // [N_F] -> [h x w], uncovered cells 0
  Tensor unflatten(const Tensor& grid) const;  // [h x w] -> [N_F]

  std::string to_json() const;
  static FlattenMap from_json(const std::string& text);
  void save(const std::filesystem::path& p) const;
  static FlattenMap load(const std::filesystem::path& p);

  bool operator==(const FlattenMap& o) const { return h_ == o.h_ && w_ == o.w_ && cells_ == o.cells_; }

 private:
  std::size_t h_, w_;
  std::vector<Cell> cells_;
  std::vector<long> inverse_;  // cell -> voxel or -1
};

Tensor patchify(const ImageSample& img, std::size_t p);      // [N_p x p*p*c], row-major patch order
Tensor patchify_grid(const Tensor& grid, std::size_t p);      // [N x p*p]
Tensor flatten_fmri(const FmriSample& f, const FlattenMap& map);

using Params = io::NamedTensors;

// Parameters placed on a graph. Trainable ones are leaves.
class ParamVars {
 public:
  ParamVars(ag::Graph& g, const Params& params, bool trainable);
  ParamVars(ag::Graph& g, std::map<std::string, ag::Var> vars) : g_(&g), vars_(std::move(vars)) {}
  ag::Var operator[](const std::string& name) const;
  const std::map<std::string, ag::Var>& all() const { return vars_; }
  ag::Graph& graph() const { return *g_; }

 private:
  ag::Graph* g_;
  std::map<std::string, ag::Var> vars_;
};

struct BatchEncoding {
  ag::Var cls;     // [B x d]
  ag::Var tokens;  // [B*N x d]
  std::size_t batch = 0, n = 0;
};

// learned encoders, truncated-normal(0.02) weights
void init_visual(Params& p, const EncoderConfig& cfg, std::uint64_t seed);
void init_fmri(Params& p, const EncoderConfig& cfg, std::uint64_t seed);
// frozen text encoder, fully determined by cfg.seed
Params init_text(const EncoderConfig& cfg);

// shared trunk: prepend CLS, add positions, pre-norm blocks, final norm
BatchEncoding run_encoder(const ParamVars& pv, const std::string& prefix, ag::Var embedded, std::size_t batch,
                          std::size_t n, const EncoderConfig& cfg, const std::vector<bool>* valid = nullptr);

BatchEncoding encode_visual_batch(const ParamVars& pv, const Tensor& patches, std::size_t batch,
                                  const EncoderConfig& cfg);
BatchEncoding encode_fmri_batch(const ParamVars& pv, const Tensor& patches, std::size_t batch,
                                const EncoderConfig& cfg);

struct TextBatch {
  Tensor cls;     // [B x d]
  Tensor tokens;  // [B*N_c x d]
  std::vector<bool> valid;  // B*N_c
};
TextBatch encode_text_batch(const std::vector<TokenSequence>& seqs, const Params& text, const EncoderConfig& cfg);

EncodedSequence encode_visual(const Tensor& patches, const Params& params, const EncoderConfig& cfg);
EncodedSequence encode_fmri(const Tensor& grid, const Params& params, const EncoderConfig& cfg);
EncodedSequence encode_text(const TokenSequence& t, const Params& text, const EncoderConfig& cfg);

void check_token_sequence(const TokenSequence& t, const EncoderConfig& cfg);

}  // namespace bractive::enc
