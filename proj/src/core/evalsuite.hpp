#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "baselines.hpp"
#include "encoder.hpp"
#include "generator.hpp"
#include "json_util.hpp"
#include "metrics.hpp"
#include "perceptual.hpp"

namespace clcae {

struct MetricRow {
  std::string name;
  double psnr = 0.0, ssim = 0.0, lpips_proxy = 0.0, id_sim = 0.0, seconds_per_image = 0.0;
  std::int64_t samples = 0;
  // "ok", "untrained", or "failed: <reason>"; metric fields are zero otherwise.
  std::string status = "ok";
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::int64_t sample_count = 0;
  std::uint64_t seed = 0;
  bool timed = true;

  const MetricRow& row(const std::string& name) const;  // NotFoundError
  std::string to_csv() const;
  Json to_json() const;
  std::string to_markdown() const;
  // report.csv, report.json and report.md under `dir`.
  void write(const std::filesystem::path& dir) const;
};

// Full-scale reference values, reported as metadata alongside toy results.
Json published_reference();

// Batched inverter: [B, 3, R, R] images -> reconstructions of the same shape.
using Inverter = std::function<torch::Tensor(const torch::Tensor&)>;

struct Variant {
  std::string name;
  Inverter invert;  // empty -> row reported as untrained
  // Timing repetitions for this row; 0 uses EvalOptions::repetitions.
  int timing_repetitions = 0;
  int timing_images = 0;
};

struct EvalOptions {
  bool timing = true;
  int repetitions = 3;
  int timing_images = 8;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

// Per-variant metric means over `images`, plus per-image latency: each timed
// image is inverted alone, single-threaded, after one warm-up call; the
// reported value is the median over repetitions of the mean per-image time.
MetricReport evaluate(const std::vector<Variant>& variants, const torch::Tensor& images,
                      const PerceptualEmbedder& embedder, const EvalOptions& options = {});

// Inverters for one trained encoder at each reconstruction level.
Inverter encoder_inverter(std::shared_ptr<const Encoder> encoder, std::shared_ptr<const Generator> generator,
                          InversionLevel level);
Inverter optimization_inverter(std::shared_ptr<const Generator> generator,
                               std::shared_ptr<const PerceptualEmbedder> embedder, OptimizeConfig cfg);

struct AblationModels {
  std::shared_ptr<const Encoder> full;
  std::shared_ptr<const Encoder> no_align;
  std::shared_ptr<const Encoder> no_wplus_attention;
  std::shared_ptr<const Encoder> no_f_attention;
};

// Row names in table order.
const std::vector<std::string>& ablation_row_names();

// The seven ablation rows; missing models are reported as untrained.
MetricReport ablate(std::shared_ptr<const Generator> generator, const AblationModels& models,
                    const torch::Tensor& images, std::shared_ptr<const PerceptualEmbedder> embedder,
                    const OptimizeConfig& optimize, const EvalOptions& options = {});

}  // namespace clcae
