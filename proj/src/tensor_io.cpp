// SPDX-License-Identifier: Apache-2.0
#include "bractive/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

namespace bractive::io {

double to_f32(double v) {
  if (std::abs(v) > static_cast<double>(std::numeric_limits<float>::max()))
    throw ValueError("value " + std::to_string(v) + " does not fit 32-bit storage");
  return static_cast<double>(static_cast<float>(v));
}

void round_to_f32(Tensor& t) {
  for (auto& v : t.data()) v = to_f32(v);
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(to_f32(v))));
}

class Reader {
 public:
  Reader(std::string data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("corrupt file " + what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f32() {
    float f = std::bit_cast<float>(u32());
    if (!std::isfinite(f)) throw IoError("corrupt file " + what_ + ": non-finite value");
    return static_cast<double>(f);
  }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }
  const std::string& what() const { return what_; }

 private:
  std::string data_;
  std::string what_;
  std::size_t pos_ = 0;
};

void encode(std::string& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) put_f32(out, v);
}

Tensor decode(Reader& r) {
  auto rank = r.u32();
  if (rank == 0 || rank > 8) throw IoError("corrupt file " + r.what() + ": bad rank " + std::to_string(rank));
  Shape s(rank);
  std::size_t n = 1;
  for (auto& e : s) {
    e = r.u32();
    if (e == 0) throw IoError("corrupt file " + r.what() + ": zero extent");
    n *= e;
  }
  r.need(4 * n);
  std::vector<double> d(n);
  for (auto& v : d) v = r.f32();
  return Tensor(std::move(s), std::move(d));
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) { write_bytes(path, text); }

void write_tensor(const fs::path& path, const Tensor& t) {
  std::string out = "BRT1";
  encode(out, t);
  write_bytes(path, out);
}

Tensor read_tensor(const fs::path& path) {
  Reader r(read_text(path), path.string());
  if (r.bytes(4) != "BRT1") throw IoError("corrupt file " + path.string() + ": bad magic");
  Tensor t = decode(r);
  if (!r.done()) throw IoError("corrupt file " + path.string() + ": trailing bytes");
  return t;
}

void write_archive(const fs::path& path, const NamedTensors& tensors) {
  std::string out = "BRA1";
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    encode(out, t);
  }
  write_bytes(path, out);
}

NamedTensors read_archive(const fs::path& path) {
  Reader r(read_text(path), path.string());
  if (r.bytes(4) != "BRA1") throw IoError("corrupt archive " + path.string() + ": bad magic");
  auto n = r.u32();
  NamedTensors out;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto len = r.u32();
    auto name = r.bytes(len);
    out.emplace(name, decode(r));
  }
  if (!r.done()) throw IoError("corrupt archive " + path.string() + ": trailing bytes");
  return out;
}

std::uint64_t directory_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& f : files) {
    feed(f.generic_string());
    feed(read_text(dir / f));
  }
  return h;
}

}  // namespace bractive::io
