// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bractive/encoders.hpp"
#include "bractive/roi.hpp"

namespace bractive::data {

namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;
inline constexpr std::size_t kPadToken = 0;

struct GeneratorConfig {
  std::size_t num_samples = 2500;
  std::size_t num_classes = 6;  // C
  std::size_t min_subjects = 1, max_subjects = 2;
  std::size_t image_h = 32, image_w = 32, channels = 3;
  std::size_t fmri_h = 32, fmri_w = 32;
  std::size_t context = 16;  // N_c
  std::size_t vocab = 32;
  std::size_t min_caption_len = 16;  // captions shorter than N_c are padded
  double noise_std = 0.1;
  double mu_on = 1.0;
  double mu_off = 0.2;  // ceiling for absent-block means, used by checks
  std::size_t roi_h = 8, roi_w = 8;
  bool roi_misaligned = false;
  std::size_t blob_min = 8, blob_max = 12;
  std::size_t folds = 5;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t first_filler() const { return 1 + num_classes; }
};

struct SubjectClass {
  std::size_t id = 0;
  std::size_t token = 0;
  std::array<double, 3> color{};
  std::size_t orientation = 0;  // 0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal stripes
  std::size_t period = 2;
  std::size_t roi_row = 0, roi_col = 0;  // top-left grid cell of the block
  std::vector<std::size_t> roi_block;    // voxel indices, ascending
};

struct Sample {
  std::size_t id = 0;
  enc::ImageSample image;
  enc::TokenSequence caption;
  enc::FmriSample fmri;
  std::vector<std::size_t> present;       // ascending class ids
  std::vector<roi::RoiMask> gt_masks;     // aligned with present
};

struct SampleInfo {
  std::size_t id = 0;
  std::vector<std::size_t> present;
  std::size_t fold = 0;
};

struct Manifest {
  GeneratorConfig cfg;
  std::vector<std::string> vocab;
  std::vector<SubjectClass> classes;
  std::vector<SampleInfo> samples;
  std::string flatten_map_file = "flatten_map.json";

  std::string to_json() const;
  static Manifest from_json(const std::string& text);
};

std::vector<std::string> make_vocab(const GeneratorConfig& cfg);
std::vector<SubjectClass> make_classes(const GeneratorConfig& cfg, const enc::FlattenMap& map);
Sample generate_sample(const GeneratorConfig& cfg, const std::vector<SubjectClass>& classes,
                       const enc::FlattenMap& map, std::size_t id);
std::vector<std::size_t> assign_folds(const GeneratorConfig& cfg, const std::vector<SampleInfo>& samples);

Manifest gen_dataset(const GeneratorConfig& cfg, const fs::path& out, unsigned threads = 1);

// class token positions in a caption, in class-id order of `present`
std::vector<std::size_t> subject_positions(const Sample& s, const std::vector<SubjectClass>& classes);

struct Split {
  std::vector<std::size_t> train, val;
};
Split kfold_split(const Manifest& m, std::size_t fold);

class Dataset {
 public:
  static Dataset load(const fs::path& dir);

  const Manifest& manifest() const { return manifest_; }
  const enc::FlattenMap& flatten_map() const { return map_; }
  const fs::path& dir() const { return dir_; }
  std::size_t size() const { return manifest_.samples.size(); }
  Sample sample(std::size_t id) const;

 private:
  Dataset(fs::path dir, Manifest m, enc::FlattenMap map)
      : dir_(std::move(dir)), manifest_(std::move(m)), map_(std::move(map)) {}
  fs::path dir_;
  Manifest manifest_;
  enc::FlattenMap map_;
};

void write_sample(const fs::path& dir, const Sample& s);
std::string sample_stem(std::size_t id);

// encoder settings implied by a corpus
void check_compatible(const GeneratorConfig& g, const enc::EncoderConfig& e);

}  // namespace bractive::data
