// SPDX-License-Identifier: Apache-2.0
#include "bractive/roi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "bractive/tensor_io.hpp"

namespace bractive::roi {

void LocalizeConfig::validate() const {
  if (s == 0) throw ConfigError("localize.s must be >= 1");
  if (!(gamma >= -1.0 && gamma <= 1.0)) throw ConfigError("localize.gamma must lie in [-1, 1]");
}

std::size_t RoiMask::count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), true)); }

Tensor similarity_grid(const Tensor& query, const Tensor& tokens, std::size_t gh, std::size_t gw) {
  if (tokens.rank() != 2 || tokens.dim(0) != gh * gw)
    throw DimensionError("attention map: " + shape_str(tokens.shape()) + " tokens do not tile a " +
                         std::to_string(gh) + "x" + std::to_string(gw) + " patch grid");
  if (query.size() != tokens.dim(1)) throw DimensionError("attention map: query width != token width");
  require_finite(query, "attention map query");
  require_finite(tokens, "attention map tokens");
  auto q = num::l2_normalize(query.reshaped({query.size()}), 0);
  auto t = num::l2_normalize(tokens, 1);
  Tensor b({gh, gw});
  std::size_t d = q.size();
  for (std::size_t i = 0; i < gh * gw; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += t[i * d + c] * q[c];
    b[i] = std::clamp(s, -1.0, 1.0);
  }
  return b;
}

AttentionMap attention_map(const Tensor& query, const Tensor& tokens, const enc::FlattenMap& map,
                           const LocalizeConfig& cfg) {
  cfg.validate();
  std::size_t h = map.height(), w = map.width();
  if (h % cfg.s != 0 || w % cfg.s != 0)
    throw DimensionError("attention map: scale " + std::to_string(cfg.s) + " does not divide the " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
  std::size_t gh = h / cfg.s, gw = w / cfg.s;
  if (tokens.rank() != 2 || tokens.dim(0) * cfg.s * cfg.s != h * w)
    throw DimensionError("attention map: N_r * s^2 != h_2d * w_2d (" + shape_str(tokens.shape()) + ", s=" +
                         std::to_string(cfg.s) + ")");
  auto grid = num::upsample2d(similarity_grid(query, tokens, gh, gw), cfg.s, cfg.mode);
  return {map.unflatten(grid), "fmri", ""};
}

AttentionMap visual_attention_map(const Tensor& query, const Tensor& patch_tokens, std::size_t image_h,
                                  std::size_t image_w, std::size_t patch, num::Upsample mode) {
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0)
    throw DimensionError("visual attention map: image dims not divisible by patch size");
  auto grid = similarity_grid(query, patch_tokens, image_h / patch, image_w / patch);
  return {num::upsample2d(grid, patch, mode), "visual", ""};
}

RoiMask threshold_mask(const Tensor& values, double gamma) {
  if (!(gamma >= -1.0 && gamma <= 1.0)) throw ValueError("threshold must lie in [-1, 1]");
  RoiMask m{std::vector<bool>(values.size()), gamma};
  for (std::size_t i = 0; i < values.size(); ++i) m.bits[i] = values[i] > gamma;
  return m;
}

RoiMask threshold_mask(const AttentionMap& att, double gamma) { return threshold_mask(att.values, gamma); }

double dice(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size())
    throw DimensionError("dice: mask lengths differ, " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    both += a[i] && b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dice(const RoiMask& a, const RoiMask& b) { return dice(a.bits, b.bits); }

AttentionMap average_maps(const std::vector<AttentionMap>& maps) {
  if (maps.empty()) throw DimensionError("average_maps: no maps");
  AttentionMap out{Tensor(maps[0].values.shape(), 0.0), maps[0].modality, "average"};
  for (const auto& m : maps) {
    require_same_shape(out.values, m.values, "average_maps");
    for (std::size_t i = 0; i < m.values.size(); ++i) out.values[i] += m.values[i];
  }
  for (auto& v : out.values.data()) v /= static_cast<double>(maps.size());
  return out;
}

unsigned char to_gray(double v) {
  double g = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0);
  return static_cast<unsigned char>(g);
}

Tensor render_voxels(const Tensor& voxel_values, const enc::FlattenMap& map, double fill) {
  Tensor g({map.height(), map.width()}, fill);
  if (voxel_values.size() != map.num_voxels()) throw DimensionError("render: voxel count != map domain");
  for (std::size_t v = 0; v < map.num_voxels(); ++v) {
    auto c = map.cell(v);
    g[c.row * map.width() + c.col] = voxel_values[v];
  }
  return g;
}

void write_pgm(const std::filesystem::path& p, const Tensor& grid) {
  if (grid.rank() != 2) throw DimensionError("write_pgm: expected a 2-d grid");
  std::string out = "P5\n" + std::to_string(grid.dim(1)) + " " + std::to_string(grid.dim(0)) + "\n255\n";
  for (double v : grid.data()) out.push_back(static_cast<char>(to_gray(v)));
  io::write_text(p, out);
}

void write_map_csv(const std::filesystem::path& p, const AttentionMap& att) {
  std::ostringstream os;
  os.precision(17);
  os << "index,value\n";
  for (std::size_t i = 0; i < att.values.size(); ++i) os << i << ',' << att.values[i] << '\n';
  io::write_text(p, os.str());
}

void write_mask_csv(const std::filesystem::path& p, const RoiMask& m) {
  std::ostringstream os;
  os << "voxel\n";
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i]) os << i << '\n';
  io::write_text(p, os.str());
}

std::vector<std::size_t> read_mask_csv(const std::filesystem::path& p) {
  std::istringstream is(io::read_text(p));
  std::string line;
  std::vector<std::size_t> out;
  if (!std::getline(is, line) || line != "voxel") throw IoError("corrupt mask file " + p.string() + ": bad header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stoul(line, &pos));
      if (pos != line.size()) throw std::invalid_argument(line);
    } catch (const std::exception&) {
      throw IoError("corrupt mask file " + p.string() + ": bad entry '" + line + "'");
    }
  }
  return out;
}

}  // namespace bractive::roi
