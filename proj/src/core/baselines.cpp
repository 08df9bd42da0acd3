#include "baselines.hpp"

#include <cmath>

#include "errors.hpp"

namespace clcae {

void OptimizeConfig::validate() const {
  if (steps < 1) throw ConfigError("optimize.steps must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("optimize.learning_rate must be positive");
  if (!(l2_weight >= 0.0) || !(lpips_weight >= 0.0)) throw ConfigError("optimize weights must be non-negative");
}

Json OptimizeConfig::to_json() const {
  return {{"steps", steps}, {"learning_rate", learning_rate}, {"l2_weight", l2_weight}, {"lpips_weight", lpips_weight}};
}

OptimizeConfig OptimizeConfig::from_json(const Json& j) {
  reject_unknown_keys(j, "optimize", {"steps", "learning_rate", "l2_weight", "lpips_weight"});
  OptimizeConfig c;
  read_opt(j, "steps", c.steps);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "l2_weight", c.l2_weight);
  read_opt(j, "lpips_weight", c.lpips_weight);
  c.validate();
  return c;
}

OptimizeResult optimize_w(const torch::Tensor& images, const Generator& generator, const PerceptualEmbedder& embedder,
                          const OptimizeConfig& cfg, const std::optional<torch::Tensor>& init) {
  cfg.validate();
  torch::AutoGradMode grad_on(true);
  const auto& g = generator.config();
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != g.resolution || images.size(3) != g.resolution) {
    throw ShapeError("optimize_w: images must be [B, 3, R, R] at the generator resolution, got " +
                     c10::str(images.sizes()));
  }
  const auto b = images.size(0);
  torch::Tensor w0;
  if (init) {
    if (init->dim() != 2 || init->size(0) != b || init->size(1) != g.latent_dim) {
      throw ShapeError("optimize_w: init must be [B, d], got " + c10::str(init->sizes()));
    }
    w0 = *init;
  } else {
    w0 = generator.w_mean().unsqueeze(0).expand({b, g.latent_dim});
  }
  auto target = images.detach();
  OptimizeResult result;
  auto w = w0.detach().clone().set_requires_grad(true);
  torch::optim::Adam optimizer({w}, torch::optim::AdamOptions(cfg.learning_rate));
  for (int step = 0; step < cfg.steps; ++step) {
    auto rec = generator.synthesize(broadcast(w, generator.num_styles()), std::nullopt, false).image;
    auto per_image = (rec - target).pow(2).flatten(1).mean(1) * cfg.l2_weight;
    if (cfg.lpips_weight != 0.0) per_image = per_image + cfg.lpips_weight * embedder.distance(target, rec);
    auto loss = per_image.sum();
    const double value = loss.item<double>() / static_cast<double>(b);
    if (!std::isfinite(value)) {
      result.aborted = true;
      result.aborted_step = step;
      break;
    }
    result.loss_history.push_back(value);
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
  }
  result.w = w.detach();
  return result;
}

SingleOptimizeResult optimize_w(const ImageTensor& image, const Generator& generator,
                                const PerceptualEmbedder& embedder, const OptimizeConfig& cfg,
                                const std::optional<LatentW>& init) {
  std::optional<torch::Tensor> batched_init;
  if (init) batched_init = init->values.unsqueeze(0);
  auto r = optimize_w(image.values.unsqueeze(0), generator, embedder, cfg, batched_init);
  return {{r.w.squeeze(0)}, std::move(r.loss_history), r.aborted};
}

}  // namespace clcae
