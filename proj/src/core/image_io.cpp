#include "image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>

#include "errors.hpp"

namespace clcae {
namespace F = torch::nn::functional;

std::vector<std::uint8_t> encode_png(const ImageTensor& image) {
  const auto& v = image.values;
  if (v.dim() != 3 || v.size(0) != 3) throw ShapeError("encode_png expects [3, H, W], got " + c10::str(v.sizes()));
  auto pixels = ((v.detach().to(torch::kFloat32) + 1.0) * 127.5)
                    .round()
                    .clamp(0, 255)
                    .to(torch::kUInt8)
                    .permute({1, 2, 0})
                    .contiguous();
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(v.size(2));
  img.height = static_cast<png_uint_32>(v.size(1));
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data_ptr<std::uint8_t>(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data_ptr<std::uint8_t>(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

ImageTensor decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || !png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw IoError(std::string("png decode failed: ") + (bytes.empty() ? "empty input" : img.message));
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError(std::string("png decode failed: ") + img.message);
  }
  auto t = torch::from_blob(buf.data(), {img.height, img.width, 3}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32);
  return {t / 127.5 - 1.0};
}

void write_png(const std::filesystem::path& file, const ImageTensor& image) {
  auto bytes = encode_png(image);
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + file.string());
}

ImageTensor read_png(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const IoError& e) {
    throw IoError(file.string() + ": " + e.what());
  }
}

ImageTensor center_crop_resize(const ImageTensor& image, int resolution) {
  const auto& v = image.values;
  if (v.dim() != 3 || v.size(0) != 3) throw ShapeError("expected [3, H, W], got " + c10::str(v.sizes()));
  if (resolution < 1) throw RangeError("resolution must be positive");
  const auto h = v.size(1), w = v.size(2);
  const auto side = std::min(h, w);
  auto crop = v.narrow(1, (h - side) / 2, side).narrow(2, (w - side) / 2, side).unsqueeze(0);
  if (side == resolution) return {crop.squeeze(0).contiguous()};
  auto opts = F::InterpolateFuncOptions().size(std::vector<std::int64_t>{resolution, resolution});
  if (side > resolution) {
    opts.mode(torch::kArea);
  } else {
    opts.mode(torch::kBilinear).align_corners(false);
  }
  return {F::interpolate(crop, opts).squeeze(0).clamp(-1.0, 1.0)};
}

IngestedImages ingest_images(const std::filesystem::path& folder, int resolution,
                             const std::function<void(const std::string&)>& warn) {
  if (!std::filesystem::is_directory(folder)) throw IoError("not a directory: " + folder.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(folder)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  IngestedImages out;
  std::vector<torch::Tensor> images;
  for (const auto& f : files) {
    try {
      images.push_back(center_crop_resize(read_png(f), resolution).values);
      out.names.push_back(f.filename().string());
    } catch (const Error& e) {
      out.skipped.push_back(f.filename().string());
      if (warn) warn("skipping " + f.string() + ": " + e.what());
    }
  }
  if (images.empty()) throw IoError("no readable PNG images in " + folder.string());
  out.images = torch::stack(images);
  return out;
}

}  // namespace clcae
