#include "perceptual.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"
#include "generator.hpp"

namespace clcae {
namespace F = torch::nn::functional;

PerceptualEmbedder::PerceptualEmbedder(std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::int64_t in = 3;
  for (std::int64_t out : {16, 32, 64}) {
    layers_.push_back({torch::randn({out, in, 3, 3}, rng) * std::sqrt(2.0 / (in * 9)), torch::zeros({out}), 2, true});
    in = out;
  }
  taps_ = {0, 1, 2};
  id_projection_ = torch::randn({64, in}, rng) / std::sqrt(static_cast<double>(in));
  register_layers();
}

PerceptualEmbedder::PerceptualEmbedder(std::vector<Layer> layers, std::vector<int> taps, torch::Tensor id_projection)
    : layers_(std::move(layers)), taps_(std::move(taps)), id_projection_(std::move(id_projection)) {
  if (layers_.empty() || taps_.empty()) throw ConfigError("perceptual embedder needs layers and taps");
  for (int t : taps_) {
    if (t < 0 || t >= static_cast<int>(layers_.size())) throw RangeError("perceptual tap index out of range");
  }
  if (!std::is_sorted(taps_.begin(), taps_.end())) throw ConfigError("perceptual taps must be ascending");
  register_layers();
}

void PerceptualEmbedder::register_layers() {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    l.weight = register_parameter("layer" + std::to_string(i) + "_weight", l.weight, false);
    l.bias = register_parameter("layer" + std::to_string(i) + "_bias", l.bias, false);
  }
  id_projection_ = register_parameter("id_projection", id_projection_, false);
}

std::vector<torch::Tensor> PerceptualEmbedder::taps(const torch::Tensor& images) const {
  if (images.dim() != 4) throw ShapeError("perceptual embedder expects [B, C, H, W], got " + c10::str(images.sizes()));
  std::vector<torch::Tensor> out;
  auto x = images;
  std::size_t next_tap = 0;
  for (std::size_t i = 0; i < layers_.size() && next_tap < taps_.size(); ++i) {
    const auto& l = layers_[i];
    const auto pad = l.weight.size(-1) / 2;
    x = F::conv2d(x, l.weight.to(x.dtype()),
                  F::Conv2dFuncOptions().bias(l.bias.to(x.dtype())).stride(l.stride).padding(pad));
    if (l.leaky_relu) x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
    if (static_cast<int>(i) == taps_[next_tap]) {
      out.push_back(x);
      ++next_tap;
    }
  }
  return out;
}

torch::Tensor PerceptualEmbedder::distance(const torch::Tensor& a, const torch::Tensor& b) const {
  if (a.sizes() != b.sizes()) {
    throw ShapeError("perceptual distance: shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
  auto ta = taps(a);
  auto tb = taps(b);
  auto unit = [](const torch::Tensor& x) { return x / (x.pow(2).sum(1, true).sqrt() + 1e-10); };
  torch::Tensor total;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    auto d = (unit(ta[i]) - unit(tb[i])).pow(2).sum(1).mean({1, 2});
    total = total.defined() ? total + d : d;
  }
  return total / static_cast<double>(ta.size());
}

torch::Tensor PerceptualEmbedder::identity(const torch::Tensor& images) const {
  auto last = taps(images).back();
  auto pooled = last.mean({2, 3});
  return F::linear(pooled, id_projection_.to(pooled.dtype()));
}

torch::Tensor PerceptualEmbedder::identity_similarity(const torch::Tensor& a, const torch::Tensor& b) const {
  if (a.sizes() != b.sizes()) {
    throw ShapeError("identity similarity: shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
  return F::cosine_similarity(identity(a), identity(b), F::CosineSimilarityFuncOptions().dim(1).eps(1e-8));
}

}  // namespace clcae
