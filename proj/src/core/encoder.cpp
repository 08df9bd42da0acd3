#include "encoder.hpp"

#include <bit>
#include <cmath>

#include "errors.hpp"
#include "nn_util.hpp"

namespace clcae {
namespace F = torch::nn::functional;

namespace {

bool is_pow2(int v) { return v > 0 && std::has_single_bit(static_cast<unsigned>(v)); }

int log2i(int v) { return std::bit_width(static_cast<unsigned>(v)) - 1; }

}  // namespace

void EncoderConfig::validate() const {
  if (!is_pow2(resolution) || resolution < 4) throw ConfigError("encoder.resolution must be a power of two >= 4");
  if (latent_dim < 1 || num_styles < 1) throw ConfigError("encoder: latent_dim and num_styles must be positive");
  if (heads < 1 || token_split < 1 || latent_dim % (heads * token_split) != 0) {
    throw ConfigError("encoder: heads * token_split must divide latent_dim");
  }
  if (!is_pow2(t3_resolution) || t3_resolution < 4 || 2 * t3_resolution > resolution) {
    throw ConfigError("encoder.t3_resolution must be a power of two in [4, resolution / 2]");
  }
  const auto stages = static_cast<std::size_t>(log2i(resolution) - log2i(t1_resolution()));
  if (backbone_channels.size() != stages) {
    throw ConfigError("encoder.backbone_channels needs " + std::to_string(stages) + " entries for resolution " +
                      std::to_string(resolution) + " and t3_resolution " + std::to_string(t3_resolution));
  }
  for (int c : backbone_channels) {
    if (c < 1) throw ConfigError("encoder.backbone_channels entries must be positive");
  }
  if (stage_depth < 0 || map2style_channels < 1 || f_head_channels < 1) {
    throw ConfigError("encoder: bad stage_depth/map2style_channels/f_head_channels");
  }
  if (f_layer < 1 || f_channels < 1 || !is_pow2(f_resolution) || f_resolution > t3_resolution) {
    throw ConfigError("encoder: F-space resolution must be a power of two <= t3_resolution");
  }
  if (coarse_rows < 0 || middle_rows < 0) throw ConfigError("encoder: row split must be non-negative");
}

Json EncoderConfig::to_json() const {
  return {{"resolution", resolution},
          {"latent_dim", latent_dim},
          {"num_styles", num_styles},
          {"heads", heads},
          {"token_split", token_split},
          {"t3_resolution", t3_resolution},
          {"backbone_channels", backbone_channels},
          {"stage_depth", stage_depth},
          {"map2style_channels", map2style_channels},
          {"f_head_channels", f_head_channels},
          {"f_layer", f_layer},
          {"f_channels", f_channels},
          {"f_resolution", f_resolution},
          {"coarse_rows", coarse_rows},
          {"middle_rows", middle_rows},
          {"use_wplus_attention", use_wplus_attention},
          {"use_f_attention", use_f_attention},
          {"seed", seed}};
}

EncoderConfig EncoderConfig::from_json(const Json& j) {
  reject_unknown_keys(j, "encoder",
                      {"resolution", "latent_dim", "num_styles", "heads", "token_split", "t3_resolution",
                       "backbone_channels", "stage_depth", "map2style_channels", "f_head_channels", "f_layer",
                       "f_channels", "f_resolution", "coarse_rows", "middle_rows", "use_wplus_attention",
                       "use_f_attention", "seed"});
  EncoderConfig c;
  read_opt(j, "resolution", c.resolution);
  read_opt(j, "latent_dim", c.latent_dim);
  read_opt(j, "num_styles", c.num_styles);
  read_opt(j, "heads", c.heads);
  read_opt(j, "token_split", c.token_split);
  read_opt(j, "t3_resolution", c.t3_resolution);
  read_opt(j, "backbone_channels", c.backbone_channels);
  read_opt(j, "stage_depth", c.stage_depth);
  read_opt(j, "map2style_channels", c.map2style_channels);
  read_opt(j, "f_head_channels", c.f_head_channels);
  read_opt(j, "f_layer", c.f_layer);
  read_opt(j, "f_channels", c.f_channels);
  read_opt(j, "f_resolution", c.f_resolution);
  read_opt(j, "coarse_rows", c.coarse_rows);
  read_opt(j, "middle_rows", c.middle_rows);
  read_opt(j, "use_wplus_attention", c.use_wplus_attention);
  read_opt(j, "use_f_attention", c.use_f_attention);
  read_opt(j, "seed", c.seed);
  c.validate();
  return c;
}

EncoderConfig EncoderConfig::for_generator(const GeneratorConfig& gen) {
  EncoderConfig c;
  c.resolution = gen.resolution;
  c.latent_dim = gen.latent_dim;
  c.num_styles = gen.num_styles();
  c.f_layer = gen.f_layer;
  c.f_channels = gen.layer_channels(gen.f_layer);
  c.f_resolution = gen.layer_resolution(gen.f_layer);
  c.t3_resolution = std::max(4, std::min(gen.resolution / 2, std::max(16, c.f_resolution)));
  while (c.heads > 1 && c.latent_dim % (c.heads * c.token_split) != 0) c.heads /= 2;
  c.backbone_channels.clear();
  const int stages = log2i(c.resolution) - log2i(c.t1_resolution());
  for (int i = 0; i < stages; ++i) c.backbone_channels.push_back(std::min(16 << i, 128));
  return c;
}

// ---------------------------------------------------------------------------

torch::Tensor cross_attention(const torch::Tensor& query_src, const torch::Tensor& kv_src, const torch::Tensor& w_q,
                              const torch::Tensor& w_k, const torch::Tensor& w_v, const torch::Tensor& w_o,
                              int heads, int token_split, torch::Tensor* weights) {
  if (query_src.dim() != 3 || kv_src.dim() != 3) {
    throw ShapeError("cross_attention expects [B, P, d] inputs, got " + c10::str(query_src.sizes()) + " and " +
                     c10::str(kv_src.sizes()));
  }
  const auto b = query_src.size(0), p = query_src.size(1), d = query_src.size(2);
  if (kv_src.size(0) != b || kv_src.size(2) != d || (kv_src.size(1) != p && kv_src.size(1) != 1)) {
    throw ShapeError("cross_attention: key/value source " + c10::str(kv_src.sizes()) + " incompatible with query " +
                     c10::str(query_src.sizes()));
  }
  for (const auto* w : {&w_q, &w_k, &w_v, &w_o}) {
    if (w->dim() != 2 || w->size(0) != d || w->size(1) != d) {
      throw ShapeError("cross_attention: projection must be " + std::to_string(d) + "x" + std::to_string(d));
    }
  }
  const int m = token_split;
  if (heads < 1 || m < 1 || d % (heads * m) != 0) throw ConfigError("cross_attention: heads * m must divide d");
  const auto dh = d / (m * heads);
  const auto pk = kv_src.size(1);
  // [B, P, d] -> [B, P, heads, m, dh]
  auto split = [&](const torch::Tensor& x, std::int64_t rows) {
    return x.reshape({b, rows, m, heads, dh}).permute({0, 1, 3, 2, 4});
  };
  auto q = split(torch::matmul(query_src, w_q), p);
  auto k = split(torch::matmul(kv_src, w_k), pk);
  auto v = split(torch::matmul(kv_src, w_v), pk);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  auto attn = torch::softmax(scores, -1);
  if (weights) *weights = attn;
  auto out = torch::matmul(attn, v).permute({0, 1, 3, 2, 4}).reshape({b, p, d});
  return torch::matmul(out, w_o);
}

CrossAttentionBlockImpl::CrossAttentionBlockImpl(int dim, int heads, int token_split, AttentionRole role)
    : dim_(dim), heads_(heads), token_split_(token_split), role_(role) {
  if (heads < 1 || token_split < 1 || dim % (heads * token_split) != 0) {
    throw ConfigError("attention: heads * token_split must divide d");
  }
  w_q = register_parameter("w_q", torch::zeros({dim, dim}));
  w_k = register_parameter("w_k", torch::zeros({dim, dim}));
  w_v = register_parameter("w_v", torch::zeros({dim, dim}));
  w_o = register_parameter("w_o", torch::zeros({dim, dim}));
}

torch::Tensor CrossAttentionBlockImpl::forward(const torch::Tensor& query_src, const torch::Tensor& kv_src,
                                               torch::Tensor* weights) const {
  return cross_attention(query_src, kv_src, w_q, w_k, w_v, w_o, heads_, token_split_, weights);
}

Map2StyleImpl::Map2StyleImpl(int in_channels, int in_resolution, int channels, int rows, int latent_dim)
    : rows_(rows), latent_dim_(latent_dim) {
  int in = in_channels;
  for (int r = in_resolution; r > 1; r /= 2) {
    convs_.push_back(
        register_module("conv" + std::to_string(convs_.size()), torch::nn::Conv2d(conv3x3(in, channels, 2))));
    in = channels;
  }
  linear_ = register_module("linear", torch::nn::Linear(in, rows * latent_dim));
}

torch::Tensor Map2StyleImpl::forward(const torch::Tensor& x) const {
  auto h = x;
  for (const auto& conv : convs_) h = lrelu(apply_layer(conv, h));
  return apply_layer(linear_, h.flatten(1)).reshape({x.size(0), rows_, latent_dim_});
}

// ---------------------------------------------------------------------------

Encoder::Encoder(EncoderConfig cfg, torch::Tensor w_avg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (w_avg.dim() != 1 || w_avg.size(0) != cfg_.latent_dim) {
    throw ShapeError("encoder: w_avg must have length " + std::to_string(cfg_.latent_dim));
  }
  const int d = cfg_.latent_dim;
  const int n = static_cast<int>(cfg_.backbone_channels.size());
  int in = 3;
  for (int i = 0; i < n; ++i) {
    const int out = cfg_.backbone_channels[i];
    const auto name = "stage" + std::to_string(i);
    stages_.push_back(register_module(name, torch::nn::Conv2d(conv3x3(in, out, 2))));
    stage_extra_.emplace_back();
    for (int k = 0; k < cfg_.stage_depth; ++k) {
      stage_extra_.back().push_back(
          register_module(name + "_conv" + std::to_string(k), torch::nn::Conv2d(conv3x3(out, out, 1))));
    }
    in = out;
  }
  const int c1 = cfg_.backbone_channels[n - 1];
  const int c2 = cfg_.backbone_channels[n - 2];
  const int c3 = cfg_.backbone_channels[n - 3];
  lat2_ = register_module("lat2", torch::nn::Conv2d(torch::nn::Conv2dOptions(c2, c2, 1)));
  top1_ = register_module("top1", torch::nn::Conv2d(torch::nn::Conv2dOptions(c1, c2, 1)));
  lat3_ = register_module("lat3", torch::nn::Conv2d(torch::nn::Conv2dOptions(c3, d, 1)));
  top2_ = register_module("top2", torch::nn::Conv2d(torch::nn::Conv2dOptions(c2, d, 1)));

  const int r1 = cfg_.t1_resolution(), r2 = 2 * r1, r3 = cfg_.t3_resolution;
  const int ms = cfg_.map2style_channels;
  w_head_ = register_module("w_head", Map2Style(c1, r1, ms, 1, d));
  const int a = std::min(cfg_.coarse_rows, cfg_.num_styles);
  const int bm = std::min(cfg_.middle_rows, cfg_.num_styles - a);
  coarse_split_ = {a, bm, cfg_.num_styles - a - bm};
  const int in_ch[3] = {c1, c2, d};
  const int in_res[3] = {r1, r2, r3};
  for (int lvl = 0; lvl < 3; ++lvl) {
    if (coarse_split_[lvl] == 0) {
      coarse_heads_.push_back(nullptr);
      continue;
    }
    coarse_heads_.push_back(register_module("coarse" + std::to_string(lvl + 1),
                                            Map2Style(in_ch[lvl], in_res[lvl], ms, coarse_split_[lvl], d)));
  }

  wplus_block_ = register_module("wplus_attention",
                                 CrossAttentionBlock(d, cfg_.heads, cfg_.token_split, AttentionRole::WPlus));
  f_block_ = register_module("f_attention", CrossAttentionBlock(d, cfg_.heads, cfg_.token_split, AttentionRole::F));

  const int fh = cfg_.f_head_channels;
  f_head_.push_back(register_module("f_head0", torch::nn::Conv2d(torch::nn::Conv2dOptions(d, fh, 1))));
  for (int r = r3; r > cfg_.f_resolution; r /= 2) {
    f_head_.push_back(
        register_module("f_head" + std::to_string(f_head_.size()), torch::nn::Conv2d(conv3x3(fh, fh, 2))));
  }
  f_head_.push_back(
      register_module("f_head" + std::to_string(f_head_.size()), torch::nn::Conv2d(conv3x3(fh, cfg_.f_channels, 1))));

  w_avg_ = register_buffer("w_avg", w_avg.detach().clone().to(torch::kFloat32));

  seeded_init(*this, cfg_.seed ^ 0xe4c0de7ull);
  torch::NoGradGuard no_grad;
  for (auto* block : {&wplus_block_, &f_block_}) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    auto rng = make_rng(cfg_.seed ^ (block == &f_block_ ? 0xf0f0ull : 0x0f0full));
    (*block)->w_q.copy_(torch::randn({d, d}, rng) * s);
    (*block)->w_k.copy_(torch::randn({d, d}, rng) * s);
    (*block)->w_v.copy_(torch::randn({d, d}, rng) * s);
    (*block)->w_o.zero_();
  }
  // Style heads start at a tenth of the default scale.
  w_head_->head()->weight.mul_(0.1);
  for (auto& h : coarse_heads_) {
    if (h) h->head()->weight.mul_(0.1);
  }
}

void Encoder::check_images(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.resolution ||
      images.size(3) != cfg_.resolution) {
    throw ShapeError("encoder expects [B, 3, " + std::to_string(cfg_.resolution) + ", " +
                     std::to_string(cfg_.resolution) + "], got " + c10::str(images.sizes()));
  }
}

PyramidFeatures Encoder::extract_pyramid(const torch::Tensor& images) const {
  check_images(images);
  const auto n = stages_.size();
  std::vector<torch::Tensor> c;
  auto h = images;
  for (std::size_t i = 0; i < n; ++i) {
    h = lrelu(apply_layer(stages_[i], h));
    for (const auto& conv : stage_extra_[i]) h = h + lrelu(apply_layer(conv, h));
    c.push_back(h);
  }
  auto up = [](const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kNearest));
  };
  PyramidFeatures p;
  p.t1 = c[n - 1];
  p.t2 = apply_layer(lat2_, c[n - 2]) + up(apply_layer(top1_, p.t1));
  p.t3 = apply_layer(lat3_, c[n - 3]) + up(apply_layer(top2_, p.t2));
  return p;
}

torch::Tensor Encoder::predict_w(const torch::Tensor& t1) const {
  return w_head_->forward(t1).squeeze(1) + w_avg_;
}

torch::Tensor Encoder::coarse_residuals(const PyramidFeatures& pyramid) const {
  const torch::Tensor* levels[3] = {&pyramid.t1, &pyramid.t2, &pyramid.t3};
  std::vector<torch::Tensor> parts;
  for (int lvl = 0; lvl < 3; ++lvl) {
    if (coarse_split_[lvl] == 0) continue;
    if (!levels[lvl]->defined()) throw ShapeError("coarse_residuals: pyramid level missing");
    parts.push_back(coarse_heads_[lvl]->forward(*levels[lvl]));
  }
  return torch::cat(parts, 1);
}

torch::Tensor Encoder::wplus_attention(const torch::Tensor& w, const torch::Tensor& delta) const {
  if (w.dim() != 2 || delta.dim() != 3 || w.size(0) != delta.size(0) || w.size(1) != delta.size(2)) {
    throw ShapeError("wplus_attention: w " + c10::str(w.sizes()) + " vs delta " + c10::str(delta.sizes()));
  }
  auto w_rows = w.unsqueeze(1).expand_as(delta);
  if (!cfg_.use_wplus_attention) return w_rows + delta;
  return w_rows + wplus_block_->forward(w_rows, delta);
}

torch::Tensor Encoder::f_head_input(const torch::Tensor& t3, const torch::Tensor& w) const {
  if (t3.dim() != 4 || t3.size(1) != cfg_.latent_dim || t3.size(2) != cfg_.t3_resolution ||
      t3.size(3) != cfg_.t3_resolution) {
    throw ShapeError("f_attention: T3 must be [B, " + std::to_string(cfg_.latent_dim) + ", " +
                     std::to_string(cfg_.t3_resolution) + ", " + std::to_string(cfg_.t3_resolution) + "], got " +
                     c10::str(t3.sizes()));
  }
  if (w.dim() != 2 || w.size(0) != t3.size(0) || w.size(1) != cfg_.latent_dim) {
    throw ShapeError("f_attention: w must be [B, d], got " + c10::str(w.sizes()));
  }
  if (!cfg_.use_f_attention) return t3;
  const auto b = t3.size(0), c = t3.size(1), h = t3.size(2), wd = t3.size(3);
  auto queries = t3.flatten(2).transpose(1, 2);  // [B, hw, d]
  auto addend = f_block_->forward(queries, w.unsqueeze(1));
  return t3 + addend.transpose(1, 2).reshape({b, c, h, wd});
}

torch::Tensor Encoder::f_attention(const torch::Tensor& t3, const torch::Tensor& w) const {
  auto h = f_head_input(t3, w);
  for (std::size_t i = 0; i + 1 < f_head_.size(); ++i) h = lrelu(apply_layer(f_head_[i], h));
  return apply_layer(f_head_.back(), h);
}

EncoderOutput Encoder::forward(const torch::Tensor& images, InversionLevel level) const {
  EncoderOutput out;
  out.pyramid = extract_pyramid(images);
  out.w = predict_w(out.pyramid.t1);
  if (level == InversionLevel::W) return out;
  out.delta_w_plus = coarse_residuals(out.pyramid);
  out.w_plus = wplus_attention(out.w, out.delta_w_plus);
  if (level == InversionLevel::WPlus) return out;
  out.f = f_attention(out.pyramid.t3, out.w);
  return out;
}

Checkpoint Encoder::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.kind = "encoder";
  ckpt.seed = cfg_.seed;
  ckpt.config = cfg_.to_json();
  ckpt.tensors = collect_tensors(*this);
  return ckpt;
}

std::shared_ptr<Encoder> Encoder::from_checkpoint(const Checkpoint& ckpt) {
  auto cfg = EncoderConfig::from_json(ckpt.config);
  auto enc = std::make_shared<Encoder>(cfg, torch::zeros({cfg.latent_dim}));
  assign_tensors(*enc, ckpt);
  return enc;
}

std::shared_ptr<Encoder> Encoder::load(const std::filesystem::path& dir) {
  return from_checkpoint(load_checkpoint(dir, "encoder"));
}

void Encoder::save(const std::filesystem::path& dir) const { save_checkpoint(dir, to_checkpoint()); }

InversionResult invert(const Encoder& encoder, const Generator& generator, const ImageTensor& image) {
  const auto& cfg = encoder.config();
  const auto shape = generator.feature_shape(cfg.f_layer);
  if (cfg.resolution != generator.config().resolution || cfg.latent_dim != generator.latent_dim() ||
      cfg.num_styles != generator.num_styles() || cfg.f_layer != generator.f_layer() ||
      shape[0] != cfg.f_channels || shape[1] != cfg.f_resolution) {
    throw ConfigError("encoder does not match the generator configuration");
  }
  if (image.values.dim() != 3) throw ShapeError("invert expects a [3, R, R] image, got " + c10::str(image.values.sizes()));
  torch::NoGradGuard no_grad;
  auto out = encoder.forward(image.values.unsqueeze(0));
  InversionResult r;
  r.w = {out.w.squeeze(0)};
  r.w_plus = {out.w_plus.squeeze(0)};
  r.f = {out.f.squeeze(0), cfg.f_layer};
  r.pyramid = out.pyramid;
  r.delta_w_plus = {out.delta_w_plus.squeeze(0)};
  return r;
}

}  // namespace clcae
