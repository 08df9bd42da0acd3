#include "training.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "errors.hpp"
#include "metrics.hpp"
#include "nn_util.hpp"

namespace clcae {

void LossWeights::validate() const {
  for (double v : {rec, id, freg, align, lpips, l2}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }
}

Json LossWeights::to_json() const {
  return {{"rec", rec},     {"id", id}, {"freg", freg}, {"align", align}, {"lpips", lpips},
          {"l2", l2}, {"freg_per_element", freg_per_element}};
}

double LossWeights::effective_freg(std::int64_t feature_numel) const {
  if (feature_numel < 1) throw ShapeError("effective_freg: empty feature");
  return freg_per_element ? freg / static_cast<double>(feature_numel) : freg;
}

LossWeights LossWeights::from_json(const Json& j) {
  reject_unknown_keys(j, "training.weights", {"rec", "id", "freg", "align", "lpips", "l2", "freg_per_element"});
  LossWeights w;
  read_opt(j, "rec", w.rec);
  read_opt(j, "id", w.id);
  read_opt(j, "freg", w.freg);
  read_opt(j, "align", w.align);
  read_opt(j, "lpips", w.lpips);
  read_opt(j, "l2", w.l2);
  read_opt(j, "freg_per_element", w.freg_per_element);
  w.validate();
  return w;
}

namespace {

void check_recs(const torch::Tensor& images, const Reconstructions& recs, const char* what) {
  for (const auto& r : recs) {
    if (!r.defined() || r.sizes() != images.sizes()) {
      throw ShapeError(std::string(what) + ": reconstruction shape " + (r.defined() ? c10::str(r.sizes()) : "none") +
                       " does not match " + c10::str(images.sizes()));
    }
  }
}

}  // namespace

torch::Tensor rec_loss(const torch::Tensor& images, const Reconstructions& recs, const PerceptualEmbedder& embedder,
                       const LossWeights& weights) {
  check_recs(images, recs, "rec_loss");
  auto total = torch::zeros({}, images.options());
  for (const auto& r : recs) {
    if (weights.lpips != 0.0) total = total + weights.lpips * embedder.distance(images, r).mean();
    if (weights.l2 != 0.0) total = total + weights.l2 * (images - r).pow(2).mean();
  }
  return total;
}

torch::Tensor id_loss(const torch::Tensor& images, const Reconstructions& recs, const PerceptualEmbedder& embedder) {
  check_recs(images, recs, "id_loss");
  auto total = torch::zeros({}, images.options());
  for (const auto& r : recs) total = total + (1.0 - embedder.identity_similarity(images, r)).mean();
  return total;
}

torch::Tensor f_reg_loss(const torch::Tensor& f, const torch::Tensor& target) {
  if (f.sizes() != target.sizes() || f.dim() != 4) {
    throw ShapeError("f_reg_loss: f " + c10::str(f.sizes()) + " vs target " + c10::str(target.sizes()));
  }
  return (f - target).pow(2).flatten(1).sum(1).mean();
}

torch::Tensor f_reg_loss(const torch::Tensor& f, const Generator& generator, const torch::Tensor& w_plus) {
  return f_reg_loss(f, generator.layer_feature(w_plus, generator.f_layer()));
}

LossComponents total_loss(const torch::Tensor& images, const EncoderOutput& result, const Generator& generator,
                          const AlignModel* align, const PerceptualEmbedder& embedder, const LossWeights& weights) {
  weights.validate();
  if (!result.w.defined() || !result.w_plus.defined() || !result.f.defined()) {
    throw ShapeError("total_loss needs w, w+ and f");
  }
  LossComponents c;
  const int n = generator.num_styles();
  const int k = generator.f_layer();
  c.recs[0] = generator.synthesize(broadcast(result.w, n), std::nullopt, false).image;
  auto wplus_pass = generator.synthesize(result.w_plus);
  c.recs[1] = wplus_pass.image;
  c.recs[2] = generator.synthesize(result.w_plus, result.f, false).image;

  c.rec = rec_loss(images, c.recs, embedder, weights);
  c.id = weights.id != 0.0 ? id_loss(images, c.recs, embedder) : torch::zeros({}, images.options());
  c.freg = f_reg_loss(result.f, wplus_pass.features.at(static_cast<std::size_t>(k - 1)));
  if (weights.align != 0.0) {
    if (!align) throw ConfigError("total_loss: align weight is non-zero but no align model was given");
    c.align = frozen_align_loss(*align, images, result.w);
  } else {
    c.align = torch::zeros({}, images.options());
  }
  const double freg_weight = weights.effective_freg(result.f[0].numel());
  c.total = weights.rec * c.rec + weights.id * c.id + freg_weight * c.freg + weights.align * c.align;
  return c;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("training.steps must be >= 0");
  if (batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("training.learning_rate must be positive");
  if (val_every < 1 || val_samples < 0 || checkpoint_every < 0) {
    throw ConfigError("training: bad val_every/val_samples/checkpoint_every");
  }
  weights.validate();
}

Json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"seed", seed},
          {"val_every", val_every},
          {"val_samples", val_samples},
          {"checkpoint_every", checkpoint_every},
          {"weights", weights.to_json()}};
}

TrainConfig TrainConfig::from_json(const Json& j) {
  reject_unknown_keys(j, "training",
                      {"steps", "batch_size", "learning_rate", "seed", "val_every", "val_samples", "checkpoint_every",
                       "weights"});
  TrainConfig c;
  read_opt(j, "steps", c.steps);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "seed", c.seed);
  read_opt(j, "val_every", c.val_every);
  read_opt(j, "val_samples", c.val_samples);
  read_opt(j, "checkpoint_every", c.checkpoint_every);
  if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
  c.validate();
  return c;
}

LadderPsnr ladder_psnr(const Encoder& encoder, const Generator& generator, const PairDataset& data,
                       const std::vector<std::int64_t>& indices) {
  LadderPsnr out;
  if (indices.empty()) return out;
  torch::NoGradGuard no_grad;
  const int n = generator.num_styles();
  double sw = 0, sp = 0, sf = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < indices.size(); s += kChunk) {
    const auto e = std::min(indices.size(), s + kChunk);
    auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin() + static_cast<std::ptrdiff_t>(s),
                                                       indices.begin() + static_cast<std::ptrdiff_t>(e)));
    auto images = data.images.index_select(0, idx);
    auto r = encoder.forward(images);
    for (double v : psnr(images, generator.synthesize(broadcast(r.w, n), std::nullopt, false).image)) sw += v;
    for (double v : psnr(images, generator.synthesize(r.w_plus, std::nullopt, false).image)) sp += v;
    for (double v : psnr(images, generator.synthesize(r.w_plus, r.f, false).image)) sf += v;
  }
  const auto count = static_cast<double>(indices.size());
  return {sw / count, sp / count, sf / count};
}

TrainResult train_encoder(const Generator& generator, const AlignModel* align, const PerceptualEmbedder& embedder,
                          const PairDataset& data, const EncoderConfig& encoder_cfg, const TrainConfig& cfg,
                          const ProgressFn& progress, const CheckpointFn& on_checkpoint) {
  cfg.validate();
  if (!is_frozen(generator)) throw ConfigError("train_encoder: generator must be frozen");
  if (align && !is_frozen(*align)) throw ConfigError("train_encoder: align model must be frozen");
  if (cfg.weights.align != 0.0 && !align) throw ConfigError("train_encoder: align weight set but no align model");
  if (data.train_indices.empty()) throw EmptyBatchError("train_encoder: no training pairs");

  torch::manual_seed(cfg.seed);
  TrainResult result;
  result.encoder = std::make_shared<Encoder>(encoder_cfg, generator.w_mean());
  auto& encoder = *result.encoder;
  encoder.train();
  torch::optim::Adam optimizer(encoder.parameters(), torch::optim::AdamOptions(cfg.learning_rate));

  std::vector<std::int64_t> val(data.val_indices.begin(),
                                data.val_indices.begin() +
                                    static_cast<std::ptrdiff_t>(std::min<std::size_t>(
                                        data.val_indices.size(), static_cast<std::size_t>(cfg.val_samples))));
  std::mt19937_64 rng(cfg.seed);
  auto order = data.train_indices;
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size());
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                                       order.begin() + static_cast<std::ptrdiff_t>(cursor + batch)));
    cursor += batch;
    auto images = data.images.index_select(0, idx);

    auto out = encoder.forward(images);
    auto loss = total_loss(images, out, generator, align, embedder, cfg.weights);
    TrainHistoryRow row{step,
                        loss.rec.item<double>(),
                        loss.id.item<double>(),
                        loss.freg.item<double>(),
                        loss.align.item<double>(),
                        loss.total.item<double>(),
                        nan,
                        nan,
                        nan};
    if (!std::isfinite(row.total)) {
      throw TrainingError("encoder loss is not finite (rec " + std::to_string(row.l_rec) + ", id " +
                              std::to_string(row.l_id) + ", freg " + std::to_string(row.l_freg) + ", align " +
                              std::to_string(row.l_align) + ")",
                          step);
    }
    optimizer.zero_grad();
    loss.total.backward();
    optimizer.step();

    if (!val.empty() && (step % cfg.val_every == 0 || step == cfg.steps)) {
      encoder.eval();
      auto p = ladder_psnr(encoder, generator, data, val);
      encoder.train();
      row.val_psnr_w = p.w;
      row.val_psnr_wplus = p.wplus;
      row.val_psnr_f = p.f;
      result.val_psnr = p;
    }
    result.history.push_back(row);
    if (progress && (step % cfg.val_every == 0 || step == cfg.steps)) {
      progress("encoder step " + std::to_string(step) + " total " + std::to_string(row.total) + " rec " +
               std::to_string(row.l_rec) + " freg " + std::to_string(row.l_freg) + " align " +
               std::to_string(row.l_align) + " val_psnr w/w+/f " + std::to_string(row.val_psnr_w) + "/" +
               std::to_string(row.val_psnr_wplus) + "/" + std::to_string(row.val_psnr_f));
    }
    if (on_checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) on_checkpoint(step, encoder);
  }
  encoder.eval();
  freeze(encoder);
  return result;
}

void write_train_history_csv(const std::filesystem::path& file, const std::vector<TrainHistoryRow>& history) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << "step,l_rec,l_id,l_freg,l_align,total,val_psnr_w,val_psnr_wplus,val_psnr_f\n";
  out.precision(8);
  auto cell = [&](double v) -> std::ostream& {
    if (std::isfinite(v)) out << v;
    return out;
  };
  for (const auto& r : history) {
    out << r.step << ',';
    cell(r.l_rec) << ',';
    cell(r.l_id) << ',';
    cell(r.l_freg) << ',';
    cell(r.l_align) << ',';
    cell(r.total) << ',';
    cell(r.val_psnr_w) << ',';
    cell(r.val_psnr_wplus) << ',';
    cell(r.val_psnr_f) << '\n';
  }
}

}  // namespace clcae
