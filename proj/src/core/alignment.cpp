#include "alignment.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "errors.hpp"
#include "nn_util.hpp"

namespace clcae {
namespace F = torch::nn::functional;

void AlignConfig::validate() const {
  if (embed_dim <= 0) throw ConfigError("align.embed_dim must be positive");
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) throw ConfigError("align.lambda_mix must lie in [0, 1]");
  if (!(init_temperature >= kMinTemperature && init_temperature <= kMaxTemperature)) {
    throw ConfigError("align.init_temperature must lie in [0.01, 100]");
  }
  if (batch_size < 1) throw ConfigError("align.batch_size must be >= 1");
  if (steps < 0) throw ConfigError("align.steps must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("align.learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("align.weight_decay must be non-negative");
  if (latent_tokens < 1 || model_dim < 1 || heads < 1 || model_dim % heads != 0) {
    throw ConfigError("align: model_dim must be divisible by heads");
  }
  if (image_channels < 1 || image_max_channels < image_channels) {
    throw ConfigError("align: need 1 <= image_channels <= image_max_channels");
  }
  if (image_feature_dim < 1 || eval_every < 1) throw ConfigError("align: bad image_feature_dim/eval_every");
}

Json AlignConfig::to_json() const {
  return {{"embed_dim", embed_dim},
          {"lambda_mix", lambda_mix},
          {"init_temperature", init_temperature},
          {"batch_size", batch_size},
          {"steps", steps},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"latent_tokens", latent_tokens},
          {"model_dim", model_dim},
          {"heads", heads},
          {"image_channels", image_channels},
          {"image_max_channels", image_max_channels},
          {"image_feature_dim", image_feature_dim},
          {"eval_every", eval_every}};
}

AlignConfig AlignConfig::from_json(const Json& j) {
  reject_unknown_keys(j, "align",
                      {"embed_dim", "lambda_mix", "init_temperature", "batch_size", "steps", "learning_rate",
                       "weight_decay", "seed", "latent_tokens", "model_dim", "heads", "image_channels",
                       "image_max_channels", "image_feature_dim", "eval_every"});
  AlignConfig c;
  read_opt(j, "embed_dim", c.embed_dim);
  read_opt(j, "lambda_mix", c.lambda_mix);
  read_opt(j, "init_temperature", c.init_temperature);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "steps", c.steps);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "seed", c.seed);
  read_opt(j, "latent_tokens", c.latent_tokens);
  read_opt(j, "model_dim", c.model_dim);
  read_opt(j, "heads", c.heads);
  read_opt(j, "image_channels", c.image_channels);
  read_opt(j, "image_max_channels", c.image_max_channels);
  read_opt(j, "image_feature_dim", c.image_feature_dim);
  read_opt(j, "eval_every", c.eval_every);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

LatentEncoderImpl::LatentEncoderImpl(int latent_dim, int tokens, int model_dim, int heads)
    : tokens_(tokens), model_dim_(model_dim), heads_(heads) {
  if (latent_dim % tokens != 0) {
    throw ConfigError("latent_dim " + std::to_string(latent_dim) + " not divisible by latent_tokens " +
                      std::to_string(tokens));
  }
  token_in_ = register_module("token_in", torch::nn::Linear(latent_dim / tokens, model_dim));
  pos_ = register_parameter("pos", torch::zeros({tokens, model_dim}));
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({model_dim})));
  qkv_ = register_module("qkv", torch::nn::Linear(model_dim, 3 * model_dim));
  attn_out_ = register_module("attn_out", torch::nn::Linear(model_dim, model_dim));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({model_dim})));
  mlp1_ = register_module("mlp1", torch::nn::Linear(model_dim, 2 * model_dim));
  mlp2_ = register_module("mlp2", torch::nn::Linear(2 * model_dim, model_dim));
  norm_out_ = register_module("norm_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({model_dim})));
}

torch::Tensor LatentEncoderImpl::forward(const torch::Tensor& w) const {
  const auto b = w.size(0);
  auto x = apply_layer(token_in_, w.reshape({b, tokens_, -1})) + pos_;
  // Pre-norm self-attention.
  const auto dh = model_dim_ / heads_;
  auto qkv = apply_layer(qkv_, apply_layer(norm1_, x)).reshape({b, tokens_, 3, heads_, dh}).permute({2, 0, 3, 1, 4});
  auto scores = torch::matmul(qkv[0], qkv[1].transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  auto attn = torch::matmul(torch::softmax(scores, -1), qkv[2]).permute({0, 2, 1, 3}).reshape({b, tokens_, model_dim_});
  x = x + apply_layer(attn_out_, attn);
  x = x + apply_layer(mlp2_, F::gelu(apply_layer(mlp1_, apply_layer(norm2_, x))));
  return apply_layer(norm_out_, x).mean(1);
}

AlignModel::AlignModel(AlignConfig cfg, int resolution, int latent_dim)
    : cfg_(std::move(cfg)), resolution_(resolution), latent_dim_(latent_dim) {
  cfg_.validate();
  if (resolution < 4 || !std::has_single_bit(static_cast<unsigned>(resolution))) {
    throw ConfigError("align: resolution must be a power of two >= 4");
  }
  // Stride-2 convolutions down to 4x4, doubling channels up to the cap.
  std::int64_t in_ch = 3, ch = cfg_.image_channels;
  for (int r = resolution; r > 4; r /= 2) {
    image_convs_.push_back(register_module("image_conv" + std::to_string(image_convs_.size()),
                                           torch::nn::Conv2d(conv3x3(in_ch, ch, 2))));
    in_ch = ch;
    ch = std::min<std::int64_t>(cfg_.image_max_channels, ch * 2);
  }
  image_fc_ = register_module("image_fc", torch::nn::Linear(in_ch * 16, cfg_.image_feature_dim));
  image_head_ = register_module("image_head", torch::nn::Linear(cfg_.image_feature_dim, cfg_.embed_dim));
  latent_encoder_ = register_module("latent_encoder",
                                    LatentEncoder(latent_dim, cfg_.latent_tokens, cfg_.model_dim, cfg_.heads));
  latent_head_ = register_module("latent_head", torch::nn::Linear(cfg_.model_dim, cfg_.embed_dim));
  log_temperature_ = register_parameter("log_temperature", torch::zeros({}));

  seeded_init(*this, cfg_.seed ^ 0xa11a11ull);
  torch::NoGradGuard no_grad;
  log_temperature_.fill_(std::log(cfg_.init_temperature));
}

torch::Tensor AlignModel::embed_images(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != resolution_ || images.size(3) != resolution_) {
    throw ShapeError("embed_images: expected [B, 3, " + std::to_string(resolution_) + ", " +
                     std::to_string(resolution_) + "], got " + c10::str(images.sizes()));
  }
  auto h = images;
  for (const auto& conv : image_convs_) h = lrelu(apply_layer(conv, h));
  h = apply_layer(image_head_, lrelu(apply_layer(image_fc_, h.flatten(1))));
  return F::normalize(h, F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

torch::Tensor AlignModel::embed_latents(const torch::Tensor& w) const {
  if (w.dim() != 2 || w.size(1) != latent_dim_) {
    throw ShapeError("embed_latents: expected [B, " + std::to_string(latent_dim_) + "], got " + c10::str(w.sizes()));
  }
  auto h = apply_layer(latent_head_, latent_encoder_->forward(w));
  return F::normalize(h, F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

Embedding AlignModel::embed_image(const ImageTensor& image) const {
  return {embed_images(image.values.unsqueeze(0)).squeeze(0), true};
}

Embedding AlignModel::embed_latent(const LatentW& w) const {
  return {embed_latents(w.values.unsqueeze(0)).squeeze(0), true};
}

void AlignModel::clamp_temperature() {
  torch::NoGradGuard no_grad;
  log_temperature_.clamp_(std::log(AlignConfig::kMinTemperature), std::log(AlignConfig::kMaxTemperature));
}

Checkpoint AlignModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.kind = "align";
  ckpt.seed = cfg_.seed;
  ckpt.config = cfg_.to_json();
  ckpt.extra = {{"resolution", resolution_}, {"latent_dim", latent_dim_}};
  ckpt.tensors = collect_tensors(*this);
  return ckpt;
}

std::shared_ptr<AlignModel> AlignModel::from_checkpoint(const Checkpoint& ckpt) {
  auto model = std::make_shared<AlignModel>(AlignConfig::from_json(ckpt.config), ckpt.extra.at("resolution").get<int>(),
                                            ckpt.extra.at("latent_dim").get<int>());
  assign_tensors(*model, ckpt);
  return model;
}

std::shared_ptr<AlignModel> AlignModel::load(const std::filesystem::path& dir) {
  return from_checkpoint(load_checkpoint(dir, "align"));
}

void AlignModel::save(const std::filesystem::path& dir) const { save_checkpoint(dir, to_checkpoint()); }

// ---------------------------------------------------------------------------

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.sizes() != b.sizes()) {
    throw ShapeError("contrastive loss needs two [S, E] embedding sets of equal shape, got " + c10::str(a.sizes()) +
                     " and " + c10::str(b.sizes()));
  }
  if (a.size(0) == 0) throw EmptyBatchError("contrastive loss over an empty batch");
}

}  // namespace

torch::Tensor directional_loss(const torch::Tensor& image_embs, const torch::Tensor& latent_embs,
                               const torch::Tensor& temperature, ContrastDirection direction) {
  check_pair(image_embs, latent_embs);
  const auto& rows = direction == ContrastDirection::ImageToLatent ? image_embs : latent_embs;
  const auto& cols = direction == ContrastDirection::ImageToLatent ? latent_embs : image_embs;
  auto logits = torch::matmul(rows, cols.transpose(0, 1)) / temperature;
  auto log_probs = torch::log_softmax(logits, 1);
  return -log_probs.diagonal().mean();
}

torch::Tensor align_loss(const torch::Tensor& image_embs, const torch::Tensor& latent_embs,
                         const torch::Tensor& temperature, double lambda_mix) {
  return lambda_mix * directional_loss(image_embs, latent_embs, temperature, ContrastDirection::ImageToLatent) +
         (1.0 - lambda_mix) *
             directional_loss(image_embs, latent_embs, temperature, ContrastDirection::LatentToImage);
}

torch::Tensor align_loss(const AlignModel& model, const torch::Tensor& images, const torch::Tensor& latents) {
  return align_loss(model.embed_images(images), model.embed_latents(latents), model.temperature(),
                    model.config().lambda_mix);
}

torch::Tensor frozen_align_loss(const AlignModel& model, const torch::Tensor& images, const torch::Tensor& latents) {
  if (!is_frozen(model)) throw ConfigError("frozen_align_loss: alignment model has trainable parameters");
  torch::Tensor image_embs;
  {
    torch::NoGradGuard no_grad;
    image_embs = model.embed_images(images);
  }
  return align_loss(image_embs, model.embed_latents(latents), model.temperature(), model.config().lambda_mix);
}

double retrieval_accuracy(const torch::Tensor& image_embs, const torch::Tensor& latent_embs) {
  check_pair(image_embs, latent_embs);
  torch::NoGradGuard no_grad;
  auto sim = torch::matmul(image_embs, latent_embs.transpose(0, 1));
  const auto s = sim.size(0);
  auto matched = sim.diagonal();
  auto off = sim - torch::eye(s, sim.options()) * 1e9;  // mask the diagonal
  auto best_other = std::get<0>(off.max(1));
  return (matched > best_other).to(torch::kFloat64).mean().item<double>();
}

double retrieval_accuracy(const AlignModel& model, const torch::Tensor& images, const torch::Tensor& latents) {
  torch::NoGradGuard no_grad;
  return retrieval_accuracy(model.embed_images(images), model.embed_latents(latents));
}

double batched_retrieval(const AlignModel& model, const PairDataset& data, const std::vector<std::int64_t>& indices,
                         int way) {
  torch::NoGradGuard no_grad;
  double sum = 0.0;
  int batches = 0;
  for (std::size_t s = 0; s + static_cast<std::size_t>(way) <= indices.size(); s += static_cast<std::size_t>(way)) {
    auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin() + static_cast<std::ptrdiff_t>(s),
                                                       indices.begin() + static_cast<std::ptrdiff_t>(s) + way));
    sum += retrieval_accuracy(model, data.images.index_select(0, idx), data.latents.index_select(0, idx));
    ++batches;
  }
  if (batches == 0) throw RangeError("batched_retrieval: fewer than " + std::to_string(way) + " pairs");
  return sum / batches;
}

AlignTrainResult pretrain_align(const PairDataset& data, const AlignConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (data.train_indices.empty()) throw RangeError("pretrain_align: empty training split");
  const int resolution = static_cast<int>(data.images.size(2));
  const int latent_dim = static_cast<int>(data.latents.size(1));

  AlignTrainResult result;
  result.model = std::make_shared<AlignModel>(cfg, resolution, latent_dim);
  auto& model = *result.model;
  model.train();
  // Decoupled weight decay covers log t as well, pulling t toward 1.
  torch::optim::AdamW optimizer(model.parameters(),
                                torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::int64_t> order = data.train_indices;
  std::size_t cursor = order.size();
  const auto batch = static_cast<std::size_t>(std::min<std::size_t>(cfg.batch_size, order.size()));

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                                       order.begin() + static_cast<std::ptrdiff_t>(cursor + batch)));
    cursor += batch;
    auto images = data.images.index_select(0, idx);
    auto latents = data.latents.index_select(0, idx);

    auto image_embs = model.embed_images(images);
    auto latent_embs = model.embed_latents(latents);
    auto loss = align_loss(image_embs, latent_embs, model.temperature(), cfg.lambda_mix);
    const double loss_value = loss.item<double>();
    if (!std::isfinite(loss_value)) throw TrainingError("alignment loss is not finite", step);

    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
    model.clamp_temperature();

    AlignHistoryRow row;
    row.step = step;
    row.loss = loss_value;
    row.retrieval_top1 = batch >= 2 ? retrieval_accuracy(image_embs.detach(), latent_embs.detach()) : 1.0;
    row.temperature = model.temperature().item<double>();
    result.history.push_back(row);
    if (progress && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      progress("align step " + std::to_string(step) + " loss " + std::to_string(loss_value) + " batch_top1 " +
               std::to_string(row.retrieval_top1) + " t " + std::to_string(row.temperature));
    }
  }

  model.eval();
  freeze(model);
  const int way = std::min<int>(cfg.batch_size, static_cast<int>(data.val_indices.size()));
  result.val_retrieval_top1 = way >= 2 ? batched_retrieval(model, data, data.val_indices, way) : 0.0;
  return result;
}

void write_align_history_csv(const std::filesystem::path& file, const std::vector<AlignHistoryRow>& history) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << "step,loss,retrieval_top1\n";
  out.precision(8);
  for (const auto& r : history) out << r.step << ',' << r.loss << ',' << r.retrieval_top1 << '\n';
}

}  // namespace clcae
