#include "checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "errors.hpp"

namespace clcae {
namespace fs = std::filesystem;

namespace {

std::string blob_file_name(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (c == '/' || c == '\\') c = '_';
  }
  return out + ".f32";
}

std::uint32_t swap_bytes(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

}  // namespace

const torch::Tensor& Checkpoint::at(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw IoError("checkpoint '" + kind + "' has no tensor '" + std::string(name) + "'");
}

bool Checkpoint::contains(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void write_f32_blob(const fs::path& file, const torch::Tensor& t) {
  auto host = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  const auto n = static_cast<std::size_t>(host.numel());
  std::vector<std::uint32_t> words(n);
  std::memcpy(words.data(), host.data_ptr<float>(), n * sizeof(float));
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = swap_bytes(w);
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + file.string());
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(n * 4));
  if (!out) throw IoError("write failed: " + file.string());
}

torch::Tensor read_f32_blob(const fs::path& file, const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open blob: " + file.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::int64_t>(in.tellg());
  if (size != n * 4) {
    throw IoError("blob " + file.string() + " has " + std::to_string(size) + " bytes, expected " +
                  std::to_string(n * 4));
  }
  in.seekg(0);
  std::vector<std::uint32_t> words(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(words.data()), size);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = swap_bytes(w);
  }
  auto t = torch::empty(shape, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), words.data(), static_cast<std::size_t>(size));
  return t;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  Json manifest;
  manifest["format_version"] = ckpt.format_version;
  manifest["kind"] = ckpt.kind;
  manifest["seed"] = ckpt.seed;
  manifest["config"] = ckpt.config;
  manifest["extra"] = ckpt.extra;
  manifest["parameters"] = Json::array();
  for (const auto& t : ckpt.tensors) {
    const auto file = blob_file_name(t.name);
    write_f32_blob(dir / file, t.value);
    manifest["parameters"].push_back(
        {{"name", t.name}, {"shape", t.value.sizes().vec()}, {"file", file}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& dir, std::string_view expected_kind) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  Json manifest;
  try {
    in >> manifest;
  } catch (const Json::exception& e) {
    throw IoError("corrupt manifest in " + dir.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.format_version = manifest.at("format_version").get<int>();
    ckpt.kind = manifest.at("kind").get<std::string>();
    ckpt.seed = manifest.value("seed", std::uint64_t{0});
    ckpt.config = manifest.value("config", Json::object());
    ckpt.extra = manifest.value("extra", Json::object());
    if (ckpt.format_version != kCheckpointFormatVersion) {
      throw ConfigError("unsupported checkpoint format version " +
                        std::to_string(ckpt.format_version));
    }
    if (!expected_kind.empty() && ckpt.kind != expected_kind) {
      throw ConfigError("checkpoint in " + dir.string() + " is '" + ckpt.kind + "', expected '" +
                        std::string(expected_kind) + "'");
    }
    for (const auto& p : manifest.at("parameters")) {
      auto shape = p.at("shape").get<std::vector<std::int64_t>>();
      ckpt.tensors.push_back(
          {p.at("name").get<std::string>(), read_f32_blob(dir / p.at("file").get<std::string>(), shape)});
    }
  } catch (const Json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return ckpt;
}

std::vector<NamedTensor> collect_tensors(const torch::nn::Module& module) {
  std::vector<NamedTensor> out;
  for (const auto& item : module.named_parameters(true)) out.push_back({item.key(), item.value()});
  for (const auto& item : module.named_buffers(true)) out.push_back({item.key(), item.value()});
  return out;
}

void assign_tensors(torch::nn::Module& module, const Checkpoint& ckpt) {
  torch::NoGradGuard no_grad;
  auto load = [&](const std::string& name, torch::Tensor& dst) {
    const auto& src = ckpt.at(name);
    if (src.sizes() != dst.sizes()) {
      throw ShapeError("tensor '" + name + "' has shape " + c10::str(src.sizes()) +
                       ", module expects " + c10::str(dst.sizes()));
    }
    dst.copy_(src);
  };
  for (auto& item : module.named_parameters(true)) load(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) load(item.key(), item.value());
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
  std::uint64_t hash = 1469598103934665603ull;
  for (const auto& t : collect_tensors(module)) {
    auto host = t.value.detach().contiguous();
    const auto* bytes = static_cast<const unsigned char*>(host.data_ptr());
    const auto n = static_cast<std::size_t>(host.numel()) * host.element_size();
    for (std::size_t i = 0; i < n; ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ull;
    }
  }
  return hash;
}

}  // namespace clcae
