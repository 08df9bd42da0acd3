#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "json_util.hpp"

namespace clcae {

inline constexpr int kCheckpointFormatVersion = 1;

struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

// On disk: <dir>/manifest.json plus one little-endian float32 blob per tensor,
// listed in the manifest in serialization order.
struct Checkpoint {
  std::string kind;
  int format_version = kCheckpointFormatVersion;
  std::uint64_t seed = 0;
  Json config = Json::object();
  Json extra = Json::object();
  std::vector<NamedTensor> tensors;

  const torch::Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
};

void write_f32_blob(const std::filesystem::path& file, const torch::Tensor& t);
torch::Tensor read_f32_blob(const std::filesystem::path& file, const std::vector<std::int64_t>& shape);

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

// Throws IoError on missing/corrupt files, ConfigError on kind or version mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir, std::string_view expected_kind = {});

// Copies every entry of `named` (a module's named parameters/buffers) into a
// vector in registration order.
std::vector<NamedTensor> collect_tensors(const torch::nn::Module& module);

// Loads tensors by name into the module's parameters/buffers. Shape mismatch
// raises ShapeError, a missing name raises IoError.
void assign_tensors(torch::nn::Module& module, const Checkpoint& ckpt);

// FNV-1a hash over the raw bytes of every parameter and buffer. Used to
// verify that frozen modules are bit-identical before and after training.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

}  // namespace clcae
