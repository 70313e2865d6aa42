// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "bractive/tensor.hpp"

namespace bractive::io {

namespace fs = std::filesystem;

using NamedTensors = std::map<std::string, Tensor>;

// rounds to the nearest 32-bit float (the on-disk precision)
double to_f32(double v);
void round_to_f32(Tensor& t);

// single tensor: "BRT1", u32 rank, u32 dims[rank], f32 data; all little-endian
void write_tensor(const fs::path& path, const Tensor& t);
Tensor read_tensor(const fs::path& path);

// named archive: "BRA1", u32 count, then per entry u32 name length, name bytes, u32 rank, u32 dims, f32 data
void write_archive(const fs::path& path, const NamedTensors& tensors);
NamedTensors read_archive(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

// FNV-1a over file names and contents, sorted by relative path
std::uint64_t directory_digest(const fs::path& dir);

}  // namespace bractive::io
