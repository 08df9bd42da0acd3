#include "generator.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "errors.hpp"

namespace clcae {
namespace F = torch::nn::functional;

at::Generator make_rng(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

// ---------------------------------------------------------------------------
// GeneratorConfig

int GeneratorConfig::num_styles() const {
  return 2 * std::bit_width(static_cast<unsigned>(resolution)) - 4;
}

int GeneratorConfig::num_layers() const { return linear ? 2 : num_styles() - 1; }

int GeneratorConfig::layer_resolution(int layer) const {
  if (linear) return resolution;
  return 4 << (layer / 2);
}

int GeneratorConfig::layer_channels(int layer) const {
  if (linear) return layer == 1 ? linear_feature_channels : 3;
  return channels.at(layer_resolution(layer));
}

void GeneratorConfig::validate() const {
  if (resolution < 4 || !std::has_single_bit(static_cast<unsigned>(resolution))) {
    throw ConfigError("generator.resolution must be a power of two >= 4");
  }
  if (latent_dim <= 0) throw ConfigError("generator.latent_dim must be positive");
  if (mapping_layers < 1) throw ConfigError("generator.mapping_layers must be >= 1");
  if (f_layer < 1 || f_layer >= num_layers()) {
    throw ConfigError("generator.f_layer must satisfy 1 <= k < " + std::to_string(num_layers()));
  }
  if (linear) {
    if (linear_feature_channels <= 0) throw ConfigError("generator.linear_feature_channels must be positive");
    return;
  }
  for (int r = 4; r <= resolution; r *= 2) {
    auto it = channels.find(r);
    if (it == channels.end() || it->second <= 0) {
      throw ConfigError("generator.channels needs a positive count for resolution " + std::to_string(r));
    }
  }
}

Json GeneratorConfig::to_json() const {
  Json ch = Json::object();
  for (auto [r, c] : channels) ch[std::to_string(r)] = c;
  return {{"resolution", resolution},   {"latent_dim", latent_dim},
          {"mapping_layers", mapping_layers}, {"channels", ch},
          {"f_layer", f_layer},         {"seed", seed},
          {"style_gain", style_gain},   {"rgb_gain", rgb_gain},
          {"linear", linear},           {"linear_feature_channels", linear_feature_channels}};
}

GeneratorConfig GeneratorConfig::from_json(const Json& j) {
  reject_unknown_keys(j, "generator",
                      {"resolution", "latent_dim", "mapping_layers", "channels", "f_layer", "seed",
                       "style_gain", "rgb_gain", "linear", "linear_feature_channels"});
  GeneratorConfig c;
  read_opt(j, "resolution", c.resolution);
  read_opt(j, "latent_dim", c.latent_dim);
  read_opt(j, "mapping_layers", c.mapping_layers);
  read_opt(j, "f_layer", c.f_layer);
  read_opt(j, "seed", c.seed);
  read_opt(j, "style_gain", c.style_gain);
  read_opt(j, "rgb_gain", c.rgb_gain);
  read_opt(j, "linear", c.linear);
  read_opt(j, "linear_feature_channels", c.linear_feature_channels);
  if (j.contains("channels")) {
    c.channels.clear();
    for (const auto& [k, v] : j.at("channels").items()) {
      try {
        c.channels[std::stoi(k)] = v.get<int>();
      } catch (const std::exception&) {
        throw ConfigError("generator.channels: bad entry '" + k + "'");
      }
    }
  }
  c.validate();
  return c;
}

GeneratorConfig GeneratorConfig::linear_test(int resolution, int latent_dim) {
  GeneratorConfig c;
  c.linear = true;
  c.resolution = resolution;
  c.latent_dim = latent_dim;
  c.mapping_layers = 1;
  c.f_layer = 1;
  c.channels.clear();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Generator

Generator::Generator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  torch::NoGradGuard no_grad;
  auto rng = make_rng(cfg_.seed);
  const auto d = static_cast<std::int64_t>(cfg_.latent_dim);
  auto normal = [&](std::vector<std::int64_t> shape, double stddev) {
    return (torch::randn(shape, rng) * stddev).set_requires_grad(false);
  };
  auto zeros = [](std::vector<std::int64_t> shape) { return torch::zeros(shape); };

  for (int i = 0; i < cfg_.mapping_layers; ++i) {
    const auto p = "mapping" + std::to_string(i);
    map_w_.push_back(register_parameter(p + "_weight", normal({d, d}, std::sqrt(2.0 / d)), false));
    map_b_.push_back(register_parameter(p + "_bias", zeros({d}), false));
  }

  if (cfg_.linear) {
    const std::int64_t flat_w = cfg_.num_styles() * d;
    const auto [c, h, w] = feature_shape(1);
    const std::int64_t flat_f = c * h * w;
    const std::int64_t flat_img = 3LL * cfg_.resolution * cfg_.resolution;
    lin_a_ = register_parameter("linear_feature_weight", normal({flat_f, flat_w}, 0.3 / std::sqrt(flat_w)), false);
    lin_a_bias_ = register_parameter("linear_feature_bias", normal({flat_f}, 0.05), false);
    lin_b_ = register_parameter("linear_image_weight", normal({flat_img, flat_f}, 0.3 / std::sqrt(flat_f)), false);
    lin_c_ = register_parameter("linear_image_skip", normal({flat_img, flat_w}, 0.1 / std::sqrt(flat_w)), false);
    lin_bias_ = register_parameter("linear_image_bias", normal({flat_img}, 0.05), false);
  } else {
    const std::int64_t c4 = cfg_.channels.at(4);
    const_input_ = register_parameter("synthesis_const", normal({c4, 4, 4}, 1.0), false);
    std::int64_t in_ch = c4;
    for (int j = 1; j <= num_layers(); ++j) {
      const std::int64_t out_ch = cfg_.layer_channels(j);
      const auto p = "synthesis_conv" + std::to_string(j);
      conv_w_.push_back(register_parameter(p + "_weight", normal({out_ch, in_ch, 3, 3}, std::sqrt(2.0 / (in_ch * 9))), false));
      conv_b_.push_back(register_parameter(p + "_bias", zeros({out_ch}), false));
      const auto s = "synthesis_style" + std::to_string(j);
      style_w_.push_back(register_parameter(s + "_weight", normal({2 * out_ch, d}, cfg_.style_gain / std::sqrt(d)), false));
      style_b_.push_back(register_parameter(s + "_bias", zeros({2 * out_ch}), false));
      in_ch = out_ch;
    }
    rgb_style_w_ = register_parameter("synthesis_rgbstyle_weight", normal({in_ch, d}, cfg_.style_gain / std::sqrt(d)), false);
    rgb_style_b_ = register_parameter("synthesis_rgbstyle_bias", zeros({in_ch}), false);
    rgb_w_ = register_parameter("synthesis_rgb_weight", normal({3, in_ch, 1, 1}, cfg_.rgb_gain / std::sqrt(in_ch)), false);
    rgb_b_ = register_parameter("synthesis_rgb_bias", zeros({3}), false);
  }

  // W statistics from a fixed stream derived from the generator seed.
  auto stats_rng = make_rng(cfg_.seed ^ 0x5747a7157a75ull);
  auto z = torch::randn({kStatsSamples, d}, stats_rng);
  auto w = map(z);
  w_mean_ = register_buffer("stats_w_mean", w.mean(0));
  w_std_ = register_buffer("stats_w_std", w.std(0));
}

std::array<std::int64_t, 3> Generator::feature_shape(int layer) const {
  if (layer < 1 || layer > num_layers()) {
    throw RangeError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(num_layers()));
  }
  const std::int64_t r = cfg_.layer_resolution(layer);
  return {cfg_.layer_channels(layer), r, r};
}

torch::Tensor Generator::map(const torch::Tensor& z) const {
  if (z.dim() != 2 || z.size(1) != cfg_.latent_dim) {
    throw ShapeError("map: expected z of shape [B, " + std::to_string(cfg_.latent_dim) + "], got " +
                     c10::str(z.sizes()));
  }
  // Pixel norm on the input, then leaky-ReLU MLP.
  auto x = z * torch::rsqrt(z.pow(2).mean(1, true) + 1e-8);
  for (std::size_t i = 0; i < map_w_.size(); ++i) {
    x = F::linear(x, map_w_[i].to(x.dtype()), map_b_[i].to(x.dtype()));
    if (i + 1 < map_w_.size()) x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  return x;
}

torch::Tensor Generator::check_w_plus(const torch::Tensor& w_plus) const {
  if (w_plus.dim() != 3 || w_plus.size(1) != num_styles() || w_plus.size(2) != cfg_.latent_dim) {
    throw ShapeError("expected w+ of shape [B, " + std::to_string(num_styles()) + ", " +
                     std::to_string(cfg_.latent_dim) + "], got " + c10::str(w_plus.sizes()));
  }
  return w_plus;
}

torch::Tensor Generator::run_layer(int layer, torch::Tensor x, const torch::Tensor& style_row) const {
  const auto i = static_cast<std::size_t>(layer - 1);
  const auto dtype = x.dtype();
  if (layer > 1 && cfg_.layer_resolution(layer) != cfg_.layer_resolution(layer - 1)) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{2.0, 2.0})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  x = F::conv2d(x, conv_w_[i].to(dtype), F::Conv2dFuncOptions().bias(conv_b_[i].to(dtype)).padding(1));
  x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
  // AdaIN: per-channel instance normalization, then style scale and shift.
  auto mean = x.mean({2, 3}, true);
  auto var = (x - mean).pow(2).mean({2, 3}, true);
  x = (x - mean) * torch::rsqrt(var + 1e-5);
  auto style = F::linear(style_row, style_w_[i].to(dtype), style_b_[i].to(dtype));
  const auto c = x.size(1);
  auto scale = style.slice(1, 0, c).unsqueeze(-1).unsqueeze(-1);
  auto shift = style.slice(1, c, 2 * c).unsqueeze(-1).unsqueeze(-1);
  return x * (1 + scale) + shift;
}

torch::Tensor Generator::to_rgb(const torch::Tensor& x, const torch::Tensor& style_row) const {
  const auto dtype = x.dtype();
  auto mod = F::linear(style_row, rgb_style_w_.to(dtype), rgb_style_b_.to(dtype));
  auto y = x * (1 + mod).unsqueeze(-1).unsqueeze(-1);
  y = F::conv2d(y, rgb_w_.to(dtype), F::Conv2dFuncOptions().bias(rgb_b_.to(dtype)));
  return torch::tanh(y);
}

SynthesisOutput Generator::synthesize_linear(const torch::Tensor& w_plus,
                                             const std::optional<torch::Tensor>& f_override) const {
  const auto dtype = w_plus.dtype();
  const auto b = w_plus.size(0);
  auto flat_w = w_plus.reshape({b, -1});
  const auto [c, h, w] = feature_shape(1);
  torch::Tensor feature =
      f_override ? *f_override : F::linear(flat_w, lin_a_.to(dtype), lin_a_bias_.to(dtype)).reshape({b, c, h, w});
  auto flat_img = F::linear(feature.reshape({b, -1}), lin_b_.to(dtype), lin_bias_.to(dtype)) +
                  F::linear(flat_w, lin_c_.to(dtype));
  auto image = flat_img.reshape({b, 3, cfg_.resolution, cfg_.resolution});
  return {image, {feature, image}};
}

SynthesisOutput Generator::synthesize(const torch::Tensor& w_plus,
                                      const std::optional<torch::Tensor>& f_override,
                                      bool keep_features) const {
  check_w_plus(w_plus);
  const auto b = w_plus.size(0);
  const int k = cfg_.f_layer;
  if (f_override) {
    const auto [c, h, w] = feature_shape(k);
    const auto& f = *f_override;
    if (f.dim() != 4 || f.size(0) != b || f.size(1) != c || f.size(2) != h || f.size(3) != w) {
      throw ShapeError("f override must have shape [" + std::to_string(b) + ", " + std::to_string(c) +
                       ", " + std::to_string(h) + ", " + std::to_string(w) + "], got " +
                       c10::str(f.sizes()));
    }
  }
  if (cfg_.linear) return synthesize_linear(w_plus, f_override);

  SynthesisOutput out;
  int first = 1;
  torch::Tensor x;
  if (f_override && !keep_features) {
    x = *f_override;
    first = k + 1;
  } else {
    x = const_input_.to(w_plus.dtype()).unsqueeze(0).expand({b, -1, -1, -1});
  }
  for (int j = first; j <= num_layers(); ++j) {
    if (f_override && j == k) {
      x = *f_override;
    } else {
      x = run_layer(j, x, w_plus.select(1, j - 1));
    }
    if (keep_features) out.features.push_back(x);
  }
  out.image = to_rgb(x, w_plus.select(1, num_styles() - 1));
  return out;
}

torch::Tensor Generator::layer_feature(const torch::Tensor& w_plus, int layer) const {
  check_w_plus(w_plus);
  feature_shape(layer);  // range check
  if (cfg_.linear) return synthesize_linear(w_plus, std::nullopt).features[static_cast<std::size_t>(layer - 1)];
  auto x = const_input_.to(w_plus.dtype()).unsqueeze(0).expand({w_plus.size(0), -1, -1, -1});
  for (int j = 1; j <= layer; ++j) x = run_layer(j, x, w_plus.select(1, j - 1));
  return x;
}

LatentW Generator::map_latent(const LatentZ& z) const {
  if (z.values.dim() != 1 || z.values.size(0) != cfg_.latent_dim) {
    throw ShapeError("map_latent: z must have length " + std::to_string(cfg_.latent_dim));
  }
  return {map(z.values.unsqueeze(0)).squeeze(0)};
}

std::pair<ImageTensor, std::vector<FeatureMap>> Generator::synthesize(
    const LatentWPlus& w_plus, const std::optional<FeatureMap>& f_override) const {
  std::optional<torch::Tensor> f;
  if (f_override) {
    if (f_override->layer_index != cfg_.f_layer) {
      throw ShapeError("f override annotates layer " + std::to_string(f_override->layer_index) +
                       ", generator F slot is layer " + std::to_string(cfg_.f_layer));
    }
    f = f_override->values.unsqueeze(0);
  }
  auto out = synthesize(w_plus.rows.unsqueeze(0), f, true);
  std::vector<FeatureMap> features;
  for (std::size_t i = 0; i < out.features.size(); ++i) {
    features.push_back({out.features[i].squeeze(0), static_cast<int>(i) + 1});
  }
  return {ImageTensor{out.image.squeeze(0)}, std::move(features)};
}

FeatureMap Generator::layer_feature(const LatentWPlus& w_plus, int layer) const {
  return {layer_feature(w_plus.rows.unsqueeze(0), layer).squeeze(0), layer};
}

Checkpoint Generator::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.kind = "generator";
  ckpt.seed = cfg_.seed;
  ckpt.config = cfg_.to_json();
  ckpt.extra = {{"num_styles", num_styles()}, {"num_layers", num_layers()}};
  ckpt.tensors = collect_tensors(*this);
  return ckpt;
}

std::shared_ptr<Generator> Generator::from_checkpoint(const Checkpoint& ckpt) {
  auto gen = std::make_shared<Generator>(GeneratorConfig::from_json(ckpt.config));
  assign_tensors(*gen, ckpt);
  return gen;
}

std::shared_ptr<Generator> Generator::load(const std::filesystem::path& dir) {
  return from_checkpoint(load_checkpoint(dir, "generator"));
}

void Generator::save(const std::filesystem::path& dir) const { save_checkpoint(dir, to_checkpoint()); }

// ---------------------------------------------------------------------------

LatentWPlus broadcast(const LatentW& w, int num_styles) {
  return {w.values.unsqueeze(0).expand({num_styles, -1}).contiguous()};
}

torch::Tensor broadcast(const torch::Tensor& w, int num_styles) {
  if (w.dim() != 2) throw ShapeError("broadcast: expected [B, d], got " + c10::str(w.sizes()));
  return w.unsqueeze(1).expand({-1, num_styles, -1});
}

std::int64_t PairDataset::disk_bytes(std::int64_t count, int resolution, int latent_dim) {
  return count * (3LL * resolution * resolution + latent_dim) * 4;
}

PairDataset sample_pairs(const Generator& gen, std::int64_t count, std::uint64_t seed, double val_fraction) {
  if (count <= 0) throw RangeError("sample_pairs: count must be positive");
  torch::NoGradGuard no_grad;
  auto rng = make_rng(seed);
  const auto d = gen.latent_dim();
  const auto res = gen.config().resolution;
  PairDataset ds;
  ds.seed = seed;
  ds.latents = gen.map(torch::randn({count, d}, rng));
  ds.images = torch::empty({count, 3, res, res});
  constexpr std::int64_t kChunk = 256;
  for (std::int64_t s = 0; s < count; s += kChunk) {
    const auto e = std::min(count, s + kChunk);
    auto w = ds.latents.slice(0, s, e);
    ds.images.slice(0, s, e).copy_(gen.synthesize(broadcast(w, gen.num_styles()), std::nullopt, false).image);
  }

  std::vector<std::int64_t> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(seed);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(count) * val_fraction));
  ds.val_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  ds.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(ds.val_indices.begin(), ds.val_indices.end());
  std::sort(ds.train_indices.begin(), ds.train_indices.end());
  return ds;
}

void save_pairs(const std::filesystem::path& dir, const PairDataset& ds) {
  Checkpoint ckpt;
  ckpt.kind = "pairs";
  ckpt.seed = ds.seed;
  ckpt.extra = {{"train_indices", ds.train_indices}, {"val_indices", ds.val_indices}};
  ckpt.tensors = {{"images", ds.images}, {"latents", ds.latents}};
  save_checkpoint(dir, ckpt);
}

PairDataset load_pairs(const std::filesystem::path& dir) {
  auto ckpt = load_checkpoint(dir, "pairs");
  PairDataset ds;
  ds.seed = ckpt.seed;
  ds.images = ckpt.at("images");
  ds.latents = ckpt.at("latents");
  ds.train_indices = ckpt.extra.at("train_indices").get<std::vector<std::int64_t>>();
  ds.val_indices = ckpt.extra.at("val_indices").get<std::vector<std::int64_t>>();
  return ds;
}

}  // namespace clcae
