#pragma once

#include <torch/torch.h>

namespace clcae {

// Single-sample domain values. Batched code paths work on raw tensors with a
// leading batch dimension; these wrap one sample with its role attached.

struct LatentZ {
  torch::Tensor values;  // [d]
};

struct LatentW {
  torch::Tensor values;  // [d]
};

// One d-vector per style layer. Also used for the coarse residual.
struct LatentWPlus {
  torch::Tensor rows;  // [N, d]
};

struct FeatureMap {
  torch::Tensor values;  // [c, h, w]
  int layer_index = 0;   // 1-based convolution ordinal
};

// 3 x res x res, entries in [-1, 1].
struct ImageTensor {
  torch::Tensor values;
};

}  // namespace clcae
