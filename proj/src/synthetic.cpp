// SPDX-License-Identifier: Apache-2.0
#include "bractive/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <thread>

#include "bractive/config.hpp"
#include "bractive/random.hpp"
#include "bractive/tensor_io.hpp"
#include "json.hpp"

namespace bractive::data {

using json = nlohmann::json;

void GeneratorConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(num_classes >= 2, "data.num_classes: C ≥ 2 required");
  need(min_subjects >= 1 && min_subjects <= max_subjects, "data: need 1 ≤ min_subjects ≤ max_subjects");
  need(max_subjects <= num_classes, "data.max_subjects exceeds the number of classes");
  need(vocab >= num_classes + 2, "data.vocab must hold pad, C subject tokens and at least one filler");
  need(context >= 1 && min_caption_len >= 1 && min_caption_len <= context, "data: need 1 ≤ min_caption_len ≤ context");
  need(max_subjects <= min_caption_len, "data.max_subjects exceeds min_caption_len");
  need(image_h > 0 && image_w > 0 && (channels == 1 || channels == 3), "data: image dims invalid (channels 1 or 3)");
  need(fmri_h > 0 && fmri_w > 0, "data: fmri grid dims must be positive");
  need(roi_h > 0 && roi_w > 0 && roi_h <= fmri_h && roi_w <= fmri_w, "data: roi block must fit the fmri grid");
  need(blob_min >= 1 && blob_min <= blob_max && blob_max <= std::min(image_h, image_w), "data: blob sizes invalid");
  need(noise_std >= 0 && std::isfinite(noise_std), "data.noise_std must be nonnegative");
  need(mu_on > mu_off, "data: mu_on must exceed mu_off");
  need(folds >= 2 && num_samples >= folds, "data: need at least as many samples as folds (≥ 2)");
}

std::vector<std::string> make_vocab(const GeneratorConfig& cfg) {
  std::vector<std::string> v{"<pad>"};
  for (std::size_t c = 0; c < cfg.num_classes; ++c) v.push_back("subject" + std::to_string(c));
  for (std::size_t f = cfg.first_filler(); f < cfg.vocab; ++f) v.push_back("filler" + std::to_string(f - cfg.first_filler()));
  return v;
}

namespace {

std::array<double, 3> hue_color(double h) {
  // HSV with s = v = 0.9
  double s = 0.9, v = 0.9;
  double hh = std::fmod(h, 1.0) * 6.0;
  auto i = static_cast<int>(std::floor(hh));
  double f = hh - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Rect {
  std::size_t y, x, s;
  bool overlaps(const Rect& o) const {
    return y < o.y + o.s && o.y < y + s && x < o.x + o.s && o.x < x + s;
  }
};

}  // namespace

std::vector<SubjectClass> make_classes(const GeneratorConfig& cfg, const enc::FlattenMap& map) {
  cfg.validate();
  if (map.height() != cfg.fmri_h || map.width() != cfg.fmri_w)
    throw ConfigError("flatten map grid does not match data.fmri_h/fmri_w");
  std::size_t off_r = cfg.roi_misaligned ? cfg.roi_h / 2 : 0;
  std::size_t off_c = cfg.roi_misaligned ? cfg.roi_w / 2 : 0;
  std::size_t rows = (cfg.fmri_h - off_r) / cfg.roi_h, cols = (cfg.fmri_w - off_c) / cfg.roi_w;
  if (rows * cols < cfg.num_classes)
    throw ConfigError("roi blocks exceed grid capacity: " + std::to_string(cfg.num_classes) + " classes, room for " +
                      std::to_string(rows * cols));
  Rng rng(mix_seed(cfg.seed, 0xC1A55));
  std::vector<std::size_t> slots(rows * cols);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  rng.shuffle(slots);
  std::vector<SubjectClass> out;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    SubjectClass k;
    k.id = c;
    k.token = 1 + c;
    k.color = hue_color(static_cast<double>(c) / static_cast<double>(cfg.num_classes));
    k.orientation = c % 4;
    k.period = 2 + 2 * ((c / 4) % 2);
    k.roi_row = off_r + (slots[c] / cols) * cfg.roi_h;
    k.roi_col = off_c + (slots[c] % cols) * cfg.roi_w;
    for (std::size_t r = k.roi_row; r < k.roi_row + cfg.roi_h; ++r)
      for (std::size_t q = k.roi_col; q < k.roi_col + cfg.roi_w; ++q)
        if (auto v = map.voxel_at(r, q)) k.roi_block.push_back(*v);
    std::sort(k.roi_block.begin(), k.roi_block.end());
    if (k.roi_block.empty()) throw ConfigError("roi block of class " + std::to_string(c) + " covers no voxel");
    out.push_back(std::move(k));
  }
  return out;
}

Sample generate_sample(const GeneratorConfig& cfg, const std::vector<SubjectClass>& classes,
                       const enc::FlattenMap& map, std::size_t id) {
  Rng rng(mix_seed(cfg.seed, id));
  Sample s;
  s.id = id;

  std::size_t m = cfg.min_subjects + rng.below(cfg.max_subjects - cfg.min_subjects + 1);
  std::vector<std::size_t> pool(cfg.num_classes);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (std::size_t i = 0; i < m; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  s.present.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(s.present.begin(), s.present.end());

  // image: dim noisy background, one striped colour square per subject
  std::size_t H = cfg.image_h, W = cfg.image_w, C = cfg.channels;
  Tensor px({H, W, C});
  for (auto& v : px.data()) v = rng.uniform(0.0, 0.15);
  // a placement can leave no room for the next square, so whole layouts are redrawn
  std::vector<Rect> placed;
  for (int layout = 0; layout < 200 && placed.size() < m; ++layout) {
    placed.clear();
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t side = cfg.blob_min + rng.below(cfg.blob_max - cfg.blob_min + 1);
      Rect r{};
      bool ok = false;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        r = {rng.below(H - side + 1), rng.below(W - side + 1), side};
        ok = std::none_of(placed.begin(), placed.end(), [&](const Rect& o) { return r.overlaps(o); });
      }
      if (!ok) break;
      placed.push_back(r);
    }
  }
  if (placed.size() < m) throw ConfigError("image too small to place " + std::to_string(m) + " disjoint subject blobs");
  for (std::size_t i = 0; i < m; ++i) {
    const auto& k = classes[s.present[i]];
    const auto& r = placed[i];
    std::size_t side = r.s;
    for (std::size_t y = r.y; y < r.y + side; ++y)
      for (std::size_t x = r.x; x < r.x + side; ++x) {
        std::size_t u = k.orientation == 0 ? y : k.orientation == 1 ? x : k.orientation == 2 ? x + y : x + H - y;
        double stripe = (u / k.period) % 2 == 0 ? 1.0 : -1.0;
        double gain = 0.8 + 0.2 * stripe;
        for (std::size_t ch = 0; ch < C; ++ch) {
          double base = C == 1 ? (k.color[0] + k.color[1] + k.color[2]) / 3.0 : k.color[ch];
          px[(y * W + x) * C + ch] = std::clamp(base * gain, 0.0, 1.0);
        }
      }
  }
  io::round_to_f32(px);
  s.image = {H, W, C, std::move(px)};

  // caption: subject tokens at random positions of a random-length prefix
  std::size_t L = cfg.min_caption_len + rng.below(cfg.context - cfg.min_caption_len + 1);
  std::vector<std::size_t> pos(L);
  for (std::size_t i = 0; i < L; ++i) pos[i] = i;
  for (std::size_t i = 0; i < m; ++i) std::swap(pos[i], pos[i + rng.below(L - i)]);
  s.caption.ids.assign(cfg.context, kPadToken);
  s.caption.valid.assign(cfg.context, false);
  std::size_t nfill = cfg.vocab - cfg.first_filler();
  for (std::size_t i = 0; i < L; ++i) {
    s.caption.ids[i] = cfg.first_filler() + rng.below(nfill);
    s.caption.valid[i] = true;
  }
  for (std::size_t i = 0; i < m; ++i) s.caption.ids[pos[i]] = classes[s.present[i]].token;

  // fmri: gaussian background plus a plateau on every present class block
  Tensor vox({map.num_voxels()});
  for (auto& v : vox.data()) v = cfg.noise_std * rng.normal();
  for (auto c : s.present)
    for (auto v : classes[c].roi_block) vox[v] += cfg.mu_on;
  io::round_to_f32(vox);
  s.fmri = {std::move(vox)};

  for (auto c : s.present) {
    roi::RoiMask mask{std::vector<bool>(map.num_voxels(), false), 0.0};
    for (auto v : classes[c].roi_block) mask.bits[v] = true;
    s.gt_masks.push_back(std::move(mask));
  }
  return s;
}

std::vector<std::size_t> assign_folds(const GeneratorConfig& cfg, const std::vector<SampleInfo>& samples) {
  // stratify by the set of present classes, then deal round-robin
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups[samples[i].present].push_back(i);
  Rng rng(mix_seed(cfg.seed, 0xF01D));
  std::vector<std::size_t> fold(samples.size());
  std::size_t counter = 0;
  for (auto& [key, members] : groups) {
    rng.shuffle(members);
    for (auto i : members) fold[i] = counter++ % cfg.folds;
  }
  return fold;
}

std::string sample_stem(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", id);
  return buf;
}

void write_sample(const fs::path& dir, const Sample& s) {
  auto stem = sample_stem(s.id);
  io::write_tensor(dir / "samples" / (stem + ".image.bin"), s.image.pixels);
  io::write_tensor(dir / "samples" / (stem + ".fmri.bin"), s.fmri.voxels);
  Tensor cap({s.caption.ids.size()});
  for (std::size_t i = 0; i < cap.size(); ++i) cap[i] = static_cast<double>(s.caption.ids[i]);
  io::write_tensor(dir / "samples" / (stem + ".caption.bin"), cap);
  for (std::size_t i = 0; i < s.present.size(); ++i)
    roi::write_mask_csv(dir / "masks" / (stem + ".class" + std::to_string(s.present[i]) + ".csv"), s.gt_masks[i]);
}

Manifest gen_dataset(const GeneratorConfig& cfg, const fs::path& out, unsigned threads) {
  cfg.validate();
  auto map = enc::FlattenMap::identity(cfg.fmri_h, cfg.fmri_w);
  Manifest m;
  m.cfg = cfg;
  m.vocab = make_vocab(cfg);
  m.classes = make_classes(cfg, map);
  std::error_code ec;
  fs::create_directories(out / "samples", ec);
  fs::create_directories(out / "masks", ec);
  if (ec || !fs::is_directory(out / "samples")) throw IoError("cannot create corpus directory " + out.string());

  m.samples.resize(cfg.num_samples);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(cfg.num_samples)));
  auto work = [&](std::size_t t) {
    for (std::size_t id = t; id < cfg.num_samples; id += threads) {
      auto s = generate_sample(cfg, m.classes, map, id);
      write_sample(out, s);
      m.samples[id] = {id, s.present, 0};
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(threads);
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          work(t);
        } catch (...) {
          errs[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
  }
  auto folds = assign_folds(cfg, m.samples);
  for (std::size_t i = 0; i < folds.size(); ++i) m.samples[i].fold = folds[i];
  map.save(out / m.flatten_map_file);
  io::write_text(out / "manifest.json", m.to_json());
  return m;
}

std::vector<std::size_t> subject_positions(const Sample& s, const std::vector<SubjectClass>& classes) {
  std::vector<std::size_t> pos;
  for (auto c : s.present) {
    auto it = std::find(s.caption.ids.begin(), s.caption.ids.end(), classes.at(c).token);
    if (it == s.caption.ids.end())
      throw InvariantError("sample " + std::to_string(s.id) + ": caption lacks token of class " + std::to_string(c));
    pos.push_back(static_cast<std::size_t>(it - s.caption.ids.begin()));
  }
  return pos;
}

std::string Manifest::to_json() const {
  json j;
  j["format_version"] = kFormatVersion;
  j["seed"] = cfg.seed;
  j["config"] = config::to_json(cfg);
  j["dims"] = {{"image", {cfg.image_h, cfg.image_w, cfg.channels}},
               {"fmri_grid", {cfg.fmri_h, cfg.fmri_w}},
               {"num_voxels", cfg.fmri_h * cfg.fmri_w},
               {"context", cfg.context}};
  j["vocab"] = vocab;
  json cls = json::array();
  for (const auto& k : classes)
    cls.push_back({{"id", k.id},
                   {"token", k.token},
                   {"color", k.color},
                   {"orientation", k.orientation},
                   {"period", k.period},
                   {"roi_origin", {k.roi_row, k.roi_col}},
                   {"roi_block", k.roi_block}});
  j["classes"] = cls;
  j["flatten_map"] = flatten_map_file;
  json smp = json::array();
  for (const auto& s : samples) smp.push_back({{"id", s.id}, {"present", s.present}, {"fold", s.fold}});
  j["samples"] = smp;
  return j.dump(1);
}

Manifest Manifest::from_json(const std::string& text) {
  Manifest m;
  try {
    auto j = json::parse(text);
    if (j.at("format_version").get<int>() != kFormatVersion)
      throw IoError("manifest format version " + j.at("format_version").dump() + " is not supported");
    m.cfg = config::data_from_json(j.at("config"));
    m.vocab = j.at("vocab").get<std::vector<std::string>>();
    for (const auto& c : j.at("classes")) {
      SubjectClass k;
      k.id = c.at("id");
      k.token = c.at("token");
      k.color = c.at("color").get<std::array<double, 3>>();
      k.orientation = c.at("orientation");
      k.period = c.at("period");
      k.roi_row = c.at("roi_origin").at(0);
      k.roi_col = c.at("roi_origin").at(1);
      k.roi_block = c.at("roi_block").get<std::vector<std::size_t>>();
      m.classes.push_back(std::move(k));
    }
    m.flatten_map_file = j.at("flatten_map");
    for (const auto& s : j.at("samples"))
      m.samples.push_back({s.at("id"), s.at("present").get<std::vector<std::size_t>>(), s.at("fold")});
  } catch (const json::exception& e) {
    throw IoError(std::string("invalid manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("invalid manifest config: ") + e.what());
  }
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    if (m.samples[i].id != i) throw IoError("manifest sample ids must be 0..n-1 in order");
    if (m.samples[i].fold >= m.cfg.folds) throw IoError("manifest sample " + std::to_string(i) + " has a bad fold");
  }
  if (m.classes.size() != m.cfg.num_classes) throw IoError("manifest class table size mismatch");
  return m;
}

Split kfold_split(const Manifest& m, std::size_t fold) {
  if (fold >= m.cfg.folds)
    throw ConfigError("fold must be 0.." + std::to_string(m.cfg.folds - 1) + ", got " + std::to_string(fold));
  Split s;
  for (const auto& info : m.samples) (info.fold == fold ? s.val : s.train).push_back(info.id);
  return s;
}

Dataset Dataset::load(const fs::path& dir) {
  if (!fs::is_regular_file(dir / "manifest.json")) throw IoError("no manifest.json in " + dir.string());
  auto m = Manifest::from_json(io::read_text(dir / "manifest.json"));
  auto map = enc::FlattenMap::load(dir / m.flatten_map_file);
  if (map.height() != m.cfg.fmri_h || map.width() != m.cfg.fmri_w)
    throw IoError("flatten map does not match the manifest grid");
  return Dataset(dir, std::move(m), std::move(map));
}

Sample Dataset::sample(std::size_t id) const {
  if (id >= manifest_.samples.size()) throw ValueError("sample id " + std::to_string(id) + " out of range");
  const auto& cfg = manifest_.cfg;
  const auto& info = manifest_.samples[id];
  auto stem = sample_stem(id);
  try {
    Sample s;
    s.id = id;
    s.present = info.present;
    auto px = io::read_tensor(dir_ / "samples" / (stem + ".image.bin"));
    if (px.shape() != Shape{cfg.image_h, cfg.image_w, cfg.channels})
      throw IoError("image shape " + shape_str(px.shape()) + " does not match manifest");
    s.image = {cfg.image_h, cfg.image_w, cfg.channels, std::move(px)};
    auto vox = io::read_tensor(dir_ / "samples" / (stem + ".fmri.bin"));
    if (vox.shape() != Shape{map_.num_voxels()}) throw IoError("fmri shape " + shape_str(vox.shape()) + " mismatch");
    s.fmri = {std::move(vox)};
    auto cap = io::read_tensor(dir_ / "samples" / (stem + ".caption.bin"));
    if (cap.shape() != Shape{cfg.context}) throw IoError("caption shape " + shape_str(cap.shape()) + " mismatch");
    for (double v : cap.data()) {
      if (v < 0 || v >= static_cast<double>(cfg.vocab) || v != std::floor(v))
        throw IoError("caption holds invalid token id " + std::to_string(v));
      s.caption.ids.push_back(static_cast<std::size_t>(v));
      s.caption.valid.push_back(static_cast<std::size_t>(v) != kPadToken);
    }
    for (auto c : s.present) {
      auto idx = roi::read_mask_csv(dir_ / "masks" / (stem + ".class" + std::to_string(c) + ".csv"));
      roi::RoiMask mask{std::vector<bool>(map_.num_voxels(), false), 0.0};
      for (auto v : idx) {
        if (v >= mask.bits.size()) throw IoError("mask voxel " + std::to_string(v) + " out of range");
        mask.bits[v] = true;
      }
      s.gt_masks.push_back(std::move(mask));
    }
    return s;
  } catch (const Error& e) {
    throw IoError("sample " + std::to_string(id) + ": " + e.what());
  }
}

void check_compatible(const GeneratorConfig& g, const enc::EncoderConfig& e) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model/data mismatch: " + what);
  };
  need(g.image_h == e.image_h && g.image_w == e.image_w, "image size");
  need(g.channels == e.channels, "channels");
  need(g.fmri_h == e.fmri_h && g.fmri_w == e.fmri_w, "fmri grid");
  need(g.context == e.context, "context length");
  need(g.vocab == e.vocab, "vocabulary size");
}

}  // namespace bractive::data
