#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "generator.hpp"
#include "json_util.hpp"
#include "perceptual.hpp"
#include "types.hpp"

namespace clcae {

struct OptimizeConfig {
  int steps = 500;
  double learning_rate = 0.01;
  double l2_weight = 1.0;
  double lpips_weight = 0.2;

  void validate() const;
  Json to_json() const;
  static OptimizeConfig from_json(const Json& j);
};

struct OptimizeResult {
  torch::Tensor w;                  // [B, d]
  std::vector<double> loss_history;  // batch-mean loss before each step
  bool aborted = false;              // set when the loss became non-finite
  std::int64_t aborted_step = 0;
};

// Adam on w minimizing l2 * MSE(I, G(w)) + lpips * perceptual(I, G(w)) per
// image. `init` [B, d] defaults to the generator's mean w. On a non-finite
// loss the run stops and returns the history so far with `aborted` set.
OptimizeResult optimize_w(const torch::Tensor& images, const Generator& generator, const PerceptualEmbedder& embedder,
                          const OptimizeConfig& cfg, const std::optional<torch::Tensor>& init = std::nullopt);

struct SingleOptimizeResult {
  LatentW w;
  std::vector<double> loss_history;
  bool aborted = false;
};

SingleOptimizeResult optimize_w(const ImageTensor& image, const Generator& generator,
                                const PerceptualEmbedder& embedder, const OptimizeConfig& cfg,
                                const std::optional<LatentW>& init = std::nullopt);

}  // namespace clcae
