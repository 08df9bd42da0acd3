#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "checkpoint.hpp"
#include "generator.hpp"
#include "json_util.hpp"
#include "types.hpp"

namespace clcae {

struct AlignConfig {
  int embed_dim = 128;
  double lambda_mix = 0.5;
  double init_temperature = 0.07;
  int batch_size = 64;
  int steps = 2000;
  double learning_rate = 1e-3;
  double weight_decay = 1.0;
  std::uint64_t seed = 0;
  // Latent encoder: w is split into `latent_tokens` tokens fed to one
  // transformer block of width `model_dim`.
  int latent_tokens = 8;
  int model_dim = 64;
  int heads = 4;
  int image_channels = 32;
  int image_max_channels = 128;
  int image_feature_dim = 256;
  int eval_every = 500;

  static constexpr double kMinTemperature = 0.01;
  static constexpr double kMaxTemperature = 100.0;

  void validate() const;
  Json to_json() const;
  static AlignConfig from_json(const Json& j);
};

struct Embedding {
  torch::Tensor values;  // [embed_dim]
  bool normalized = true;
};

class LatentEncoderImpl : public torch::nn::Module {
 public:
  LatentEncoderImpl(int latent_dim, int tokens, int model_dim, int heads);
  torch::Tensor forward(const torch::Tensor& w) const;  // [B, d] -> [B, model_dim]

 private:
  int tokens_, model_dim_, heads_;
  torch::nn::Linear token_in_{nullptr};
  torch::Tensor pos_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm_out_{nullptr};
  torch::nn::Linear qkv_{nullptr}, attn_out_{nullptr}, mlp1_{nullptr}, mlp2_{nullptr};
};
TORCH_MODULE(LatentEncoder);

// Dual encoder with projection heads and a learnable log-temperature. The
// image branch is a strided CNN, the latent branch a token transformer.
class AlignModel : public torch::nn::Module {
 public:
  AlignModel(AlignConfig cfg, int resolution, int latent_dim);

  const AlignConfig& config() const { return cfg_; }
  int resolution() const { return resolution_; }
  int latent_dim() const { return latent_dim_; }

  // Unit-norm embeddings, batched.
  torch::Tensor embed_images(const torch::Tensor& images) const;  // [B,3,R,R] -> [B,E]
  torch::Tensor embed_latents(const torch::Tensor& w) const;      // [B,d] -> [B,E]

  Embedding embed_image(const ImageTensor& image) const;
  Embedding embed_latent(const LatentW& w) const;

  // t = exp(log_t); differentiable.
  torch::Tensor temperature() const { return log_temperature_.exp(); }
  void clamp_temperature();

  Checkpoint to_checkpoint() const;
  static std::shared_ptr<AlignModel> from_checkpoint(const Checkpoint& ckpt);
  static std::shared_ptr<AlignModel> load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

 private:
  AlignConfig cfg_;
  int resolution_, latent_dim_;
  std::vector<torch::nn::Conv2d> image_convs_;
  torch::nn::Linear image_fc_{nullptr}, image_head_{nullptr};
  LatentEncoder latent_encoder_{nullptr};
  torch::nn::Linear latent_head_{nullptr};
  torch::Tensor log_temperature_;
};

enum class ContrastDirection { ImageToLatent, LatentToImage };

// Mean over the batch of -log softmax of the matched pair's cosine / t, with
// rows indexed by images (ImageToLatent) or by latents (LatentToImage).
// Embeddings are expected to be unit norm. `temperature` is a 0-d tensor.
torch::Tensor directional_loss(const torch::Tensor& image_embs, const torch::Tensor& latent_embs,
                               const torch::Tensor& temperature, ContrastDirection direction);

// lambda * L(I->w) + (1 - lambda) * L(w->I).
torch::Tensor align_loss(const torch::Tensor& image_embs, const torch::Tensor& latent_embs,
                         const torch::Tensor& temperature, double lambda_mix);

torch::Tensor align_loss(const AlignModel& model, const torch::Tensor& images, const torch::Tensor& latents);

// Same value as align_loss, for a frozen model: image embeddings are computed
// without autograd and gradients reach only `latents`. Throws ConfigError if
// the model still has trainable parameters.
torch::Tensor frozen_align_loss(const AlignModel& model, const torch::Tensor& images,
                                const torch::Tensor& latents);

// Fraction of rows whose matched column has the strictly highest cosine.
double retrieval_accuracy(const torch::Tensor& image_embs, const torch::Tensor& latent_embs);
double retrieval_accuracy(const AlignModel& model, const torch::Tensor& images, const torch::Tensor& latents);

// Mean top-1 retrieval over consecutive `way`-sized batches of the indexed
// pairs (a trailing partial batch is dropped).
double batched_retrieval(const AlignModel& model, const PairDataset& data,
                         const std::vector<std::int64_t>& indices, int way);

struct AlignHistoryRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double retrieval_top1 = 0.0;  // on the training minibatch
  double temperature = 0.0;
};

struct AlignTrainResult {
  std::shared_ptr<AlignModel> model;
  std::vector<AlignHistoryRow> history;
  double val_retrieval_top1 = 0.0;
};

using ProgressFn = std::function<void(const std::string&)>;

// AdamW on align_loss over shuffled training pairs; deterministic per cfg.seed.
// Throws TrainingError on a non-finite loss.
AlignTrainResult pretrain_align(const PairDataset& data, const AlignConfig& cfg, const ProgressFn& progress = {});

void write_align_history_csv(const std::filesystem::path& file, const std::vector<AlignHistoryRow>& history);

}  // namespace clcae
