#include "nn_util.hpp"

#include <cmath>

#include "generator.hpp"

namespace clcae {

void seeded_init(torch::nn::Module& module, std::uint64_t seed, double gain) {
  torch::NoGradGuard no_grad;
  auto rng = make_rng(seed);
  for (auto& item : module.named_parameters(true)) {
    auto& p = item.value();
    if (p.dim() >= 2) {
      const auto fan_in = p.numel() / p.size(0);
      p.copy_(torch::randn(p.sizes(), rng) * (gain / std::sqrt(static_cast<double>(fan_in))));
    } else if (item.key().ends_with("weight")) {
      p.fill_(1.0);  // normalization gains
    } else {
      p.zero_();
    }
  }
}

void freeze(torch::nn::Module& module) {
  for (auto& p : module.parameters(true)) p.set_requires_grad(false);
}

bool is_frozen(const torch::nn::Module& module) {
  for (const auto& p : module.parameters(true)) {
    if (p.requires_grad()) return false;
  }
  return true;
}

}  // namespace clcae
