#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace clcae {

// Re-initializes every parameter of `module` from a seeded stream, in
// registration order: tensors with dim >= 2 get N(0, gain^2 / fan_in), vectors
// are zeroed
// except 1-D "weight" tensors (normalization gains), which start at one. Makes construction independent of torch's global RNG.
void seeded_init(torch::nn::Module& module, std::uint64_t seed, double gain = 1.4142135623730951);

// Marks every parameter as not requiring gradients.
void freeze(torch::nn::Module& module);

bool is_frozen(const torch::nn::Module& module);

inline torch::Tensor lrelu(const torch::Tensor& x) {
  return torch::nn::functional::leaky_relu(x, torch::nn::functional::LeakyReLUFuncOptions().negative_slope(0.2));
}

// Const-callable forwards for registered layers.
inline torch::Tensor apply_layer(const torch::nn::Linear& layer, const torch::Tensor& x) {
  return torch::nn::functional::linear(x, layer->weight, layer->bias);
}

inline torch::Tensor apply_layer(const torch::nn::Conv2d& layer, const torch::Tensor& x) {
  return torch::nn::functional::conv2d(x, layer->weight,
                                       torch::nn::functional::Conv2dFuncOptions()
                                           .bias(layer->bias)
                                           .stride(layer->options.stride())
                                           .padding(layer->options.padding()));
}

inline torch::Tensor apply_layer(const torch::nn::LayerNorm& layer, const torch::Tensor& x) {
  return torch::nn::functional::layer_norm(x, torch::nn::functional::LayerNormFuncOptions(
                                                  layer->options.normalized_shape())
                                                  .weight(layer->weight)
                                                  .bias(layer->bias)
                                                  .eps(layer->options.eps()));
}

inline torch::nn::Conv2dOptions conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride) {
  return torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1);
}

}  // namespace clcae
