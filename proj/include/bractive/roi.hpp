// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "bractive/encoders.hpp"
#include "bractive/ops.hpp"
#include "bractive/tensor.hpp"

namespace bractive::roi {

struct LocalizeConfig {
  std::size_t s = 8;  // upsample scale, p_f by default
  double gamma = 0.5;
  num::Upsample mode = num::Upsample::bilinear;

  void validate() const;
};

struct AttentionMap {
  Tensor values;  // voxel space [N_F], or [h x w] for the visual variant
  std::string modality;  // "fmri" or "visual"
  std::string query;     // what produced it, e.g. "text"
};

struct RoiMask {
  std::vector<bool> bits;
  double gamma = 0.0;
  std::size_t count() const;
};

// cosine of the normalised query against every token, reshaped to gh x gw
Tensor similarity_grid(const Tensor& query, const Tensor& tokens, std::size_t gh, std::size_t gw);

AttentionMap attention_map(const Tensor& query, const Tensor& tokens, const enc::FlattenMap& map,
                           const LocalizeConfig& cfg);
AttentionMap visual_attention_map(const Tensor& query, const Tensor& patch_tokens, std::size_t image_h,
                                  std::size_t image_w, std::size_t patch, num::Upsample mode);

RoiMask threshold_mask(const AttentionMap& att, double gamma);
RoiMask threshold_mask(const Tensor& values, double gamma);
double dice(const RoiMask& a, const RoiMask& b);
double dice(const std::vector<bool>& a, const std::vector<bool>& b);

// mean of several maps of identical shape
AttentionMap average_maps(const std::vector<AttentionMap>& maps);

// [-1, 1] -> [0, 255]
unsigned char to_gray(double v);
Tensor render_voxels(const Tensor& voxel_values, const enc::FlattenMap& map, double fill = -1.0);
void write_pgm(const std::filesystem::path& p, const Tensor& grid);
void write_map_csv(const std::filesystem::path& p, const AttentionMap& att);
void write_mask_csv(const std::filesystem::path& p, const RoiMask& m);
std::vector<std::size_t> read_mask_csv(const std::filesystem::path& p);

}  // namespace bractive::roi
