#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "checkpoint.hpp"
#include "json_util.hpp"
#include "types.hpp"

namespace clcae {

struct GeneratorConfig {
  int resolution = 64;
  int latent_dim = 128;
  int mapping_layers = 4;
  // Channel count per feature resolution (4, 8, ..., resolution).
  std::map<int, int> channels = {{4, 32}, {8, 32}, {16, 16}, {32, 8}, {64, 4}};
  // 1-based ordinal of the convolution layer whose output is the F-space slot.
  int f_layer = 5;
  std::uint64_t seed = 0;
  float style_gain = 0.6f;
  float rgb_gain = 0.5f;
  // Degenerate test configuration: two stacked affine layers (w+ -> feature ->
  // image) with no nonlinearity, so every output is an affine function of w+.
  bool linear = false;
  int linear_feature_channels = 2;

  int num_styles() const;
  int num_layers() const;
  int layer_resolution(int layer) const;
  int layer_channels(int layer) const;
  void validate() const;

  Json to_json() const;
  static GeneratorConfig from_json(const Json& j);
  static GeneratorConfig linear_test(int resolution = 4, int latent_dim = 4);
};

struct SynthesisOutput {
  torch::Tensor image;                  // [B, 3, R, R]
  std::vector<torch::Tensor> features;  // features[j-1] is layer j's output
};

// Frozen style-based synthesis network: mapping Z -> W, AdaIN-modulated
// convolution stack driven by w+ rows, F-space override at one layer.
// Parameters never require gradients; all methods are const and reentrant.
class Generator : public torch::nn::Module {
 public:
  explicit Generator(GeneratorConfig cfg);

  const GeneratorConfig& config() const { return cfg_; }
  int num_styles() const { return cfg_.num_styles(); }
  int num_layers() const { return cfg_.num_layers(); }
  int latent_dim() const { return cfg_.latent_dim; }
  int f_layer() const { return cfg_.f_layer; }
  std::array<std::int64_t, 3> feature_shape(int layer) const;

  // Batched: [B, d] -> [B, d].
  torch::Tensor map(const torch::Tensor& z) const;

  // Batched: w_plus [B, N, d]; f_override [B, c, h, w] replaces layer f_layer's
  // activation. With keep_features=false and an override, the layers before
  // the override are skipped entirely.
  SynthesisOutput synthesize(const torch::Tensor& w_plus,
                             const std::optional<torch::Tensor>& f_override = std::nullopt,
                             bool keep_features = true) const;

  // Batched: runs layers 1..layer only and returns that layer's output.
  torch::Tensor layer_feature(const torch::Tensor& w_plus, int layer) const;

  LatentW map_latent(const LatentZ& z) const;
  std::pair<ImageTensor, std::vector<FeatureMap>> synthesize(
      const LatentWPlus& w_plus, const std::optional<FeatureMap>& f_override = std::nullopt) const;
  FeatureMap layer_feature(const LatentWPlus& w_plus, int layer) const;

  // Monte-Carlo W statistics over standard-normal z (computed at construction).
  const torch::Tensor& w_mean() const { return w_mean_; }
  const torch::Tensor& w_std() const { return w_std_; }

  Checkpoint to_checkpoint() const;
  static std::shared_ptr<Generator> from_checkpoint(const Checkpoint& ckpt);
  static std::shared_ptr<Generator> load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

  static constexpr int kStatsSamples = 10000;

 private:
  torch::Tensor check_w_plus(const torch::Tensor& w_plus) const;
  torch::Tensor run_layer(int layer, torch::Tensor x, const torch::Tensor& style_row) const;
  torch::Tensor to_rgb(const torch::Tensor& x, const torch::Tensor& style_row) const;
  SynthesisOutput synthesize_linear(const torch::Tensor& w_plus,
                                    const std::optional<torch::Tensor>& f_override) const;

  GeneratorConfig cfg_;
  std::vector<torch::Tensor> map_w_, map_b_;
  torch::Tensor const_input_;
  std::vector<torch::Tensor> conv_w_, conv_b_, style_w_, style_b_;
  torch::Tensor rgb_style_w_, rgb_style_b_, rgb_w_, rgb_b_;
  // Linear test configuration.
  torch::Tensor lin_a_, lin_a_bias_, lin_b_, lin_c_, lin_bias_;
  torch::Tensor w_mean_, w_std_;
};

LatentWPlus broadcast(const LatentW& w, int num_styles);
// Batched: [B, d] -> [B, N, d].
torch::Tensor broadcast(const torch::Tensor& w, int num_styles);

// Generator samples: images I = G(broadcast(w)) with their ground-truth w.
struct PairDataset {
  torch::Tensor images;   // [n, 3, R, R]
  torch::Tensor latents;  // [n, d]
  std::vector<std::int64_t> train_indices;
  std::vector<std::int64_t> val_indices;
  std::uint64_t seed = 0;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  // Bytes of the on-disk blobs for a dataset of this shape.
  static std::int64_t disk_bytes(std::int64_t count, int resolution, int latent_dim);
};

PairDataset sample_pairs(const Generator& gen, std::int64_t count, std::uint64_t seed,
                         double val_fraction = 0.05);
void save_pairs(const std::filesystem::path& dir, const PairDataset& ds);
PairDataset load_pairs(const std::filesystem::path& dir);

// Seeded CPU generator for reproducible parameter init and sampling.
at::Generator make_rng(std::uint64_t seed);

}  // namespace clcae
