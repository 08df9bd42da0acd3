#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace clcae {

// Frozen randomly initialized CNN standing in for LPIPS (multi-tap distance on
// channel-normalized activations) and for the identity network R (projected,
// pooled last tap). Parameters never change after construction.
class PerceptualEmbedder : public torch::nn::Module {
 public:
  struct Layer {
    torch::Tensor weight;  // [out, in, k, k]
    torch::Tensor bias;    // [out]
    int stride = 1;
    bool leaky_relu = true;
  };

  // Default proxy: three stride-2 3x3 convolutions (16, 32, 64 channels), taps
  // after each, identity head = fixed projection of the pooled last tap.
  explicit PerceptualEmbedder(std::uint64_t seed = 1234);

  // Hand-built embedder; `taps` are 0-based layer indices, `id_projection` maps
  // the pooled channels of the last layer to the identity embedding.
  PerceptualEmbedder(std::vector<Layer> layers, std::vector<int> taps, torch::Tensor id_projection);

  // Activations at each tap, [B, C, H, W] each.
  std::vector<torch::Tensor> taps(const torch::Tensor& images) const;

  // Per-sample perceptual distance [B]: mean over taps of the spatial mean of
  // the squared difference of unit-normalized channel vectors.
  torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const;

  // Per-sample identity embedding R(x), [B, E].
  torch::Tensor identity(const torch::Tensor& images) const;

  // Per-sample cosine of identity embeddings [B], guarded by eps = 1e-8.
  torch::Tensor identity_similarity(const torch::Tensor& a, const torch::Tensor& b) const;

 private:
  void register_layers();

  std::vector<Layer> layers_;
  std::vector<int> taps_;
  torch::Tensor id_projection_;
};

}  // namespace clcae
