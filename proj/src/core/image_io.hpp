#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "types.hpp"

namespace clcae {

// 8-bit RGB PNG codec. Pixels map to [-1, 1] as x = 2 * v / 255 - 1; encoding
// rounds to the nearest level and clamps.
std::vector<std::uint8_t> encode_png(const ImageTensor& image);
ImageTensor decode_png(const std::vector<std::uint8_t>& bytes);  // [3, H, W]
void write_png(const std::filesystem::path& file, const ImageTensor& image);
ImageTensor read_png(const std::filesystem::path& file);

// Center crop to a square, then resize to `resolution` (area averaging when
// shrinking, bilinear when enlarging).
ImageTensor center_crop_resize(const ImageTensor& image, int resolution);

struct IngestedImages {
  torch::Tensor images;  // [n, 3, R, R]
  std::vector<std::string> names;
  std::vector<std::string> skipped;
};

// Loads every *.png in `folder` (sorted by name). Unreadable files are
// skipped and reported through `warn`; no usable image raises IoError.
IngestedImages ingest_images(const std::filesystem::path& folder, int resolution,
                             const std::function<void(const std::string&)>& warn = {});

}  // namespace clcae
