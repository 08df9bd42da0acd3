#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "alignment.hpp"
#include "baselines.hpp"
#include "editing.hpp"
#include "encoder.hpp"
#include "evalsuite.hpp"
#include "generator.hpp"
#include "json_util.hpp"
#include "perceptual.hpp"
#include "training.hpp"

namespace clcae {

struct DataConfig {
  std::int64_t pairs = 20000;
  double val_fraction = 0.05;
};

struct EditingConfig {
  int attributes = 4;  // synthetic SVM attributes
  std::int64_t samples = 4000;
  int pca_components = 8;
  SvmConfig svm;
};

struct EvalConfig {
  std::int64_t samples = 256;
  std::uint64_t seed = 12345;  // held-out generator samples
  int repetitions = 3;
  int timing_images = 8;
};

// Every stage reads and writes under run_dir:
//   config.json, generator/, pairs/, align/, encoder/, directions/, eval/, ablation/<variant>/
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path run_dir = "run";
  GeneratorConfig generator;
  DataConfig data;
  AlignConfig align;
  EncoderConfig encoder = EncoderConfig::for_generator(GeneratorConfig{});
  TrainConfig training;
  EditingConfig editing;
  OptimizeConfig optimize;
  EvalConfig eval;

  // Sets the seed of every section.
  void set_seed(std::uint64_t s);
  Json to_json() const;
  // Unknown keys are rejected. The encoder section is applied on top of the
  // shape derived from the generator section. A top-level seed fills every
  // section that does not set its own.
  static RunConfig from_json(const Json& j);
  static RunConfig load(const std::filesystem::path& file);
  void save(const std::filesystem::path& file) const;
};

namespace stage {

std::filesystem::path generator_dir(const RunConfig& cfg);
std::filesystem::path pairs_dir(const RunConfig& cfg);
std::filesystem::path align_dir(const RunConfig& cfg);
std::filesystem::path encoder_dir(const RunConfig& cfg);
std::filesystem::path directions_dir(const RunConfig& cfg);

void init_generator(const RunConfig& cfg, const ProgressFn& log = {});
void gen_pairs(const RunConfig& cfg, const ProgressFn& log = {});
void pretrain_align(const RunConfig& cfg, const ProgressFn& log = {});

enum class EncoderVariant { Full, NoAlign, NoWPlusAttention, NoFAttention };
std::string variant_name(EncoderVariant v);
std::filesystem::path variant_dir(const RunConfig& cfg, EncoderVariant v);
// Trains into variant_dir(); writes train_history.csv next to the checkpoint.
LadderPsnr train_encoder(const RunConfig& cfg, EncoderVariant variant = EncoderVariant::Full,
                         const ProgressFn& log = {});

// SVM: one direction per synthetic attribute ("attr0", ...); PCA: "pc0", ...
// Both merge into directions/directions.json.
void fit_directions(const RunConfig& cfg, DirectionMethod method, const ProgressFn& log = {});

// Held-out generator samples used by eval and ablate.
torch::Tensor eval_images(const RunConfig& cfg, const Generator& generator);
MetricReport evaluate(const RunConfig& cfg, bool timing, const ProgressFn& log = {});
// Trains any missing variant first.
MetricReport ablate(const RunConfig& cfg, bool timing, const ProgressFn& log = {});

}  // namespace stage

struct InversionBundle {
  InversionResult result;
  ImageTensor rec_w, rec_wplus, rec_f;
  double psnr_w = 0.0, psnr_wplus = 0.0, psnr_f = 0.0;
};

// Loaded models of a run directory; immutable after construction and safe to
// share across threads.
class Workspace {
 public:
  // Requires generator/ and encoder/; directions/ is optional.
  static std::shared_ptr<Workspace> open(const std::filesystem::path& run_dir);

  const Generator& generator() const { return *generator_; }
  const Encoder& encoder() const { return *encoder_; }
  const DirectionStore& directions() const { return directions_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }

  // Center-crops and resizes when needed.
  ImageTensor prepare(const ImageTensor& image) const;
  InversionBundle invert(const ImageTensor& image) const;
  ImageTensor edit(const InversionResult& result, const EditRequest& req) const;
  // The stored reconstruction an alpha = 0 edit reproduces.
  static const ImageTensor& reconstruction(const InversionBundle& bundle, EditMode mode);

 private:
  std::filesystem::path run_dir_;
  std::shared_ptr<Generator> generator_;
  std::shared_ptr<Encoder> encoder_;
  DirectionStore directions_;
};

}  // namespace clcae
