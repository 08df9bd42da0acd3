#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "alignment.hpp"
#include "encoder.hpp"
#include "generator.hpp"
#include "json_util.hpp"
#include "perceptual.hpp"

namespace clcae {

struct LossWeights {
  double rec = 1.0;
  double id = 0.1;
  double freg = 0.01;
  double align = 1.0;
  double lpips = 0.2;
  double l2 = 1.0;
  // Divide the f_reg weight by the per-sample element count of f.
  bool freg_per_element = true;

  // Weight applied to f_reg_loss for a feature of `feature_numel` elements.
  double effective_freg(std::int64_t feature_numel) const;
  void validate() const;
  Json to_json() const;
  static LossWeights from_json(const Json& j);
};

// The three reconstructions G(w), G(w+), G(w+, f), each [B, 3, R, R].
using Reconstructions = std::array<torch::Tensor, 3>;

// All losses are batched and averaged over the batch dimension.

// sum_i (lpips * perceptual(I, rec_i) + l2 * MSE(I, rec_i)).
torch::Tensor rec_loss(const torch::Tensor& images, const Reconstructions& recs, const PerceptualEmbedder& embedder,
                       const LossWeights& weights);

// sum_i (1 - cos(R(I), R(rec_i))).
torch::Tensor id_loss(const torch::Tensor& images, const Reconstructions& recs, const PerceptualEmbedder& embedder);

// Squared L2 distance between f and the target feature, summed per sample.
torch::Tensor f_reg_loss(const torch::Tensor& f, const torch::Tensor& target);
torch::Tensor f_reg_loss(const torch::Tensor& f, const Generator& generator, const torch::Tensor& w_plus);

struct LossComponents {
  torch::Tensor rec, id, freg, align, total;
  Reconstructions recs;
};

// Weighted sum of the four terms. `align` may be null when weights.align is
// zero; it must be frozen otherwise.
LossComponents total_loss(const torch::Tensor& images, const EncoderOutput& result, const Generator& generator,
                          const AlignModel* align, const PerceptualEmbedder& embedder, const LossWeights& weights);

struct TrainConfig {
  int steps = 800;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int val_every = 500;
  int val_samples = 256;
  int checkpoint_every = 0;
  LossWeights weights;

  void validate() const;
  Json to_json() const;
  static TrainConfig from_json(const Json& j);
};

struct LadderPsnr {
  double w = 0.0, wplus = 0.0, f = 0.0;
};

struct TrainHistoryRow {
  std::int64_t step = 0;
  double l_rec = 0.0, l_id = 0.0, l_freg = 0.0, l_align = 0.0, total = 0.0;
  // NaN on steps without validation.
  double val_psnr_w, val_psnr_wplus, val_psnr_f;
};

struct TrainResult {
  std::shared_ptr<Encoder> encoder;
  std::vector<TrainHistoryRow> history;
  LadderPsnr val_psnr;
};

using CheckpointFn = std::function<void(std::int64_t step, const Encoder&)>;

// Mean PSNR of the three reconstruction levels over the indexed pairs.
LadderPsnr ladder_psnr(const Encoder& encoder, const Generator& generator, const PairDataset& data,
                       const std::vector<std::int64_t>& indices);

// Adam on total_loss over shuffled training pairs; deterministic per cfg.seed.
// Throws TrainingError on a non-finite loss.
TrainResult train_encoder(const Generator& generator, const AlignModel* align, const PerceptualEmbedder& embedder,
                          const PairDataset& data, const EncoderConfig& encoder_cfg, const TrainConfig& cfg,
                          const ProgressFn& progress = {}, const CheckpointFn& on_checkpoint = {});

void write_train_history_csv(const std::filesystem::path& file, const std::vector<TrainHistoryRow>& history);

}  // namespace clcae
