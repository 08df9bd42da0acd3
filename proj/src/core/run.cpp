#include "run.hpp"

#include <fstream>

#include "errors.hpp"
#include "image_io.hpp"
#include "metrics.hpp"
#include "nn_util.hpp"

namespace clcae {

namespace {

Json svm_to_json(const SvmConfig& s) {
  return {{"c", s.c}, {"max_epochs", s.max_epochs}, {"tolerance", s.tolerance}};
}

void log_line(const ProgressFn& log, const std::string& line) {
  if (log) log(line);
}

}  // namespace

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  generator.seed = s;
  align.seed = s;
  encoder.seed = s;
  training.seed = s;
}

Json RunConfig::to_json() const {
  return {{"seed", seed},
          {"run_dir", run_dir.string()},
          {"generator", generator.to_json()},
          {"data", {{"pairs", data.pairs}, {"val_fraction", data.val_fraction}}},
          {"align", align.to_json()},
          {"encoder", encoder.to_json()},
          {"training", training.to_json()},
          {"editing",
           {{"attributes", editing.attributes},
            {"samples", editing.samples},
            {"pca_components", editing.pca_components},
            {"svm", svm_to_json(editing.svm)}}},
          {"optimize", optimize.to_json()},
          {"eval",
           {{"samples", eval.samples},
            {"seed", eval.seed},
            {"repetitions", eval.repetitions},
            {"timing_images", eval.timing_images}}}};
}

RunConfig RunConfig::from_json(const Json& j) {
  reject_unknown_keys(j, "config",
                      {"seed", "run_dir", "generator", "data", "align", "encoder", "training", "editing", "optimize",
                       "eval"});
  RunConfig c;
  std::optional<std::uint64_t> top_seed;
  if (j.contains("seed")) {
    read_opt(j, "seed", c.seed);
    top_seed = c.seed;
  }
  // Section seeds default to the top-level one.
  auto section = [&](const char* name) {
    Json s = j.contains(name) ? j.at(name) : Json::object();
    if (!s.is_object()) throw ConfigError(std::string(name) + ": expected a JSON object");
    if (top_seed && !s.contains("seed") && std::string(name) != "data") s["seed"] = *top_seed;
    return s;
  };
  if (j.contains("run_dir")) c.run_dir = j.at("run_dir").get<std::string>();
  c.generator = GeneratorConfig::from_json(section("generator"));
  c.generator.validate();

  const Json data = j.value("data", Json::object());
  reject_unknown_keys(data, "data", {"pairs", "val_fraction"});
  read_opt(data, "pairs", c.data.pairs);
  read_opt(data, "val_fraction", c.data.val_fraction);
  if (c.data.pairs < 1 || !(c.data.val_fraction >= 0.0 && c.data.val_fraction < 1.0)) {
    throw ConfigError("data: need pairs >= 1 and val_fraction in [0, 1)");
  }

  c.align = AlignConfig::from_json(section("align"));
  Json enc = EncoderConfig::for_generator(c.generator).to_json();
  enc.update(section("encoder"));
  c.encoder = EncoderConfig::from_json(enc);
  c.training = TrainConfig::from_json(section("training"));

  const Json ed = j.value("editing", Json::object());
  reject_unknown_keys(ed, "editing", {"attributes", "samples", "pca_components", "svm"});
  read_opt(ed, "attributes", c.editing.attributes);
  read_opt(ed, "samples", c.editing.samples);
  read_opt(ed, "pca_components", c.editing.pca_components);
  if (ed.contains("svm")) {
    const auto& s = ed.at("svm");
    reject_unknown_keys(s, "editing.svm", {"c", "max_epochs", "tolerance"});
    read_opt(s, "c", c.editing.svm.c);
    read_opt(s, "max_epochs", c.editing.svm.max_epochs);
    read_opt(s, "tolerance", c.editing.svm.tolerance);
  }
  if (c.editing.attributes < 0 || c.editing.samples < 4 || c.editing.pca_components < 1) {
    throw ConfigError("editing: need attributes >= 0, samples >= 4, pca_components >= 1");
  }

  c.optimize = OptimizeConfig::from_json(j.value("optimize", Json::object()));

  const Json ev = j.value("eval", Json::object());
  reject_unknown_keys(ev, "eval", {"samples", "seed", "repetitions", "timing_images"});
  read_opt(ev, "samples", c.eval.samples);
  read_opt(ev, "seed", c.eval.seed);
  read_opt(ev, "repetitions", c.eval.repetitions);
  read_opt(ev, "timing_images", c.eval.timing_images);
  if (c.eval.samples < 1 || c.eval.repetitions < 1 || c.eval.timing_images < 1) {
    throw ConfigError("eval: samples, repetitions and timing_images must be positive");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config " + file.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("malformed config " + file.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::save(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out << to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------

namespace stage {

std::filesystem::path generator_dir(const RunConfig& cfg) { return cfg.run_dir / "generator"; }
std::filesystem::path pairs_dir(const RunConfig& cfg) { return cfg.run_dir / "pairs"; }
std::filesystem::path align_dir(const RunConfig& cfg) { return cfg.run_dir / "align"; }
std::filesystem::path encoder_dir(const RunConfig& cfg) { return cfg.run_dir / "encoder"; }
std::filesystem::path directions_dir(const RunConfig& cfg) { return cfg.run_dir / "directions"; }

namespace {

std::shared_ptr<Generator> load_generator(const RunConfig& cfg) {
  const auto dir = generator_dir(cfg);
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw NotFoundError("no generator in " + dir.string() + " (run init-generator first)");
  }
  return Generator::load(dir);
}

PairDataset load_pair_data(const RunConfig& cfg) {
  const auto dir = pairs_dir(cfg);
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw NotFoundError("no pairs in " + dir.string() + " (run gen-pairs first)");
  }
  return load_pairs(dir);
}

std::shared_ptr<AlignModel> load_align(const RunConfig& cfg) {
  const auto dir = align_dir(cfg);
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw NotFoundError("no align model in " + dir.string() + " (run pretrain-align first)");
  }
  auto model = AlignModel::load(dir);
  model->eval();
  freeze(*model);
  return model;
}

}  // namespace

void init_generator(const RunConfig& cfg, const ProgressFn& log) {
  Generator gen(cfg.generator);
  gen.save(generator_dir(cfg));
  cfg.save(cfg.run_dir / "config.json");
  log_line(log, "generator written to " + generator_dir(cfg).string());
}

void gen_pairs(const RunConfig& cfg, const ProgressFn& log) {
  auto gen = load_generator(cfg);
  auto data = sample_pairs(*gen, cfg.data.pairs, cfg.seed, cfg.data.val_fraction);
  save_pairs(pairs_dir(cfg), data);
  log_line(log, std::to_string(data.size()) + " pairs written to " + pairs_dir(cfg).string());
}

void pretrain_align(const RunConfig& cfg, const ProgressFn& log) {
  auto data = load_pair_data(cfg);
  auto result = clcae::pretrain_align(data, cfg.align, log);
  const auto dir = align_dir(cfg);
  result.model->save(dir);
  write_align_history_csv(dir / "align_history.csv", result.history);
  log_line(log, "align model written to " + dir.string() + ", validation top-1 " +
                    std::to_string(result.val_retrieval_top1));
}

std::string variant_name(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::Full:
      return "full";
    case EncoderVariant::NoAlign:
      return "no_align";
    case EncoderVariant::NoWPlusAttention:
      return "no_wplus_attention";
    case EncoderVariant::NoFAttention:
      return "no_f_attention";
  }
  return "full";
}

std::filesystem::path variant_dir(const RunConfig& cfg, EncoderVariant v) {
  return v == EncoderVariant::Full ? encoder_dir(cfg) : cfg.run_dir / "ablation" / variant_name(v);
}

LadderPsnr train_encoder(const RunConfig& cfg, EncoderVariant variant, const ProgressFn& log) {
  auto gen = load_generator(cfg);
  auto data = load_pair_data(cfg);
  auto enc_cfg = cfg.encoder;
  auto train_cfg = cfg.training;
  if (variant == EncoderVariant::NoAlign) train_cfg.weights.align = 0.0;
  if (variant == EncoderVariant::NoWPlusAttention) enc_cfg.use_wplus_attention = false;
  if (variant == EncoderVariant::NoFAttention) enc_cfg.use_f_attention = false;
  std::shared_ptr<AlignModel> align;
  if (train_cfg.weights.align != 0.0) align = load_align(cfg);
  PerceptualEmbedder embedder;
  const auto dir = variant_dir(cfg, variant);
  auto result = clcae::train_encoder(*gen, align.get(), embedder, data, enc_cfg, train_cfg, log,
                                     [&](std::int64_t step, const Encoder& enc) {
                                       enc.save(dir / ("step" + std::to_string(step)));
                                     });
  result.encoder->save(dir);
  write_train_history_csv(dir / "train_history.csv", result.history);
  log_line(log, "encoder (" + variant_name(variant) + ") written to " + dir.string());
  return result.val_psnr;
}

void fit_directions(const RunConfig& cfg, DirectionMethod method, const ProgressFn& log) {
  auto gen = load_generator(cfg);
  torch::NoGradGuard no_grad;
  auto z = torch::randn({cfg.editing.samples, gen->latent_dim()}, make_rng(cfg.seed ^ 0xd1ec7ull));
  auto w = gen->map(z);
  DirectionStore store;
  const auto dir = directions_dir(cfg);
  if (std::filesystem::exists(dir / "directions.json")) store = DirectionStore::load(dir);
  if (method == DirectionMethod::Svm) {
    for (int a = 0; a < cfg.editing.attributes; ++a) {
      auto labels = synthetic_attribute_labels(w, cfg.seed * 1000003ull + static_cast<std::uint64_t>(a));
      auto d = fit_svm_direction(w, labels, "attr" + std::to_string(a), cfg.editing.svm);
      log_line(log, "svm direction " + d.name + " sigma " + std::to_string(d.sigma));
      store.add(std::move(d));
    }
  } else {
    for (auto& d : fit_pca_directions(w, cfg.editing.pca_components, "pc")) {
      log_line(log, "pca direction " + d.name + " sigma " + std::to_string(d.sigma));
      store.add(std::move(d));
    }
  }
  store.save(dir);
}

torch::Tensor eval_images(const RunConfig& cfg, const Generator& generator) {
  return sample_pairs(generator, cfg.eval.samples, cfg.eval.seed, 0.0).images;
}

MetricReport evaluate(const RunConfig& cfg, bool timing, const ProgressFn& log) {
  std::shared_ptr<const Generator> gen = load_generator(cfg);
  const auto dir = encoder_dir(cfg);
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw NotFoundError("no encoder in " + dir.string() + " (run train-encoder first)");
  }
  std::shared_ptr<const Encoder> enc = Encoder::load(dir);
  auto images = eval_images(cfg, *gen);
  PerceptualEmbedder embedder;
  EvalOptions opts;
  opts.timing = timing;
  opts.repetitions = cfg.eval.repetitions;
  opts.timing_images = cfg.eval.timing_images;
  opts.seed = cfg.eval.seed;
  std::vector<Variant> variants = {{"CLCAE_w", encoder_inverter(enc, gen, InversionLevel::W)},
                                   {"CLCAE_w+", encoder_inverter(enc, gen, InversionLevel::WPlus)},
                                   {"CLCAE", encoder_inverter(enc, gen, InversionLevel::Full)}};
  auto report = clcae::evaluate(variants, images, embedder, opts);
  report.write(cfg.run_dir / "eval");
  log_line(log, "report written to " + (cfg.run_dir / "eval").string());
  return report;
}

MetricReport ablate(const RunConfig& cfg, bool timing, const ProgressFn& log) {
  std::shared_ptr<const Generator> gen = load_generator(cfg);
  auto load_variant = [&](EncoderVariant v) -> std::shared_ptr<const Encoder> {
    const auto dir = variant_dir(cfg, v);
    if (!std::filesystem::exists(dir / "manifest.json")) {
      log_line(log, "training missing variant " + variant_name(v));
      train_encoder(cfg, v, log);
    }
    return Encoder::load(dir);
  };
  AblationModels models;
  models.full = load_variant(EncoderVariant::Full);
  models.no_align = load_variant(EncoderVariant::NoAlign);
  models.no_wplus_attention = load_variant(EncoderVariant::NoWPlusAttention);
  models.no_f_attention = load_variant(EncoderVariant::NoFAttention);
  auto images = eval_images(cfg, *gen);
  EvalOptions opts;
  opts.timing = timing;
  opts.repetitions = cfg.eval.repetitions;
  opts.timing_images = cfg.eval.timing_images;
  opts.seed = cfg.eval.seed;
  auto report = clcae::ablate(gen, models, images, std::make_shared<PerceptualEmbedder>(), cfg.optimize, opts);
  report.write(cfg.run_dir / "ablation");
  log_line(log, "ablation report written to " + (cfg.run_dir / "ablation").string());
  return report;
}

}  // namespace stage

// ---------------------------------------------------------------------------

std::shared_ptr<Workspace> Workspace::open(const std::filesystem::path& run_dir) {
  auto ws = std::shared_ptr<Workspace>(new Workspace());
  ws->run_dir_ = run_dir;
  if (!std::filesystem::exists(run_dir / "generator" / "manifest.json")) {
    throw NotFoundError("no generator checkpoint under " + run_dir.string());
  }
  if (!std::filesystem::exists(run_dir / "encoder" / "manifest.json")) {
    throw NotFoundError("no encoder checkpoint under " + run_dir.string());
  }
  ws->generator_ = Generator::load(run_dir / "generator");
  ws->encoder_ = Encoder::load(run_dir / "encoder");
  ws->encoder_->eval();
  freeze(*ws->encoder_);
  if (std::filesystem::exists(run_dir / "directions" / "directions.json")) {
    ws->directions_ = DirectionStore::load(run_dir / "directions");
  }
  return ws;
}

ImageTensor Workspace::prepare(const ImageTensor& image) const {
  const int r = generator_->config().resolution;
  const auto& v = image.values;
  if (v.dim() == 3 && v.size(0) == 3 && v.size(1) == r && v.size(2) == r) return image;
  return center_crop_resize(image, r);
}

InversionBundle Workspace::invert(const ImageTensor& image) const {
  torch::NoGradGuard no_grad;
  auto img = prepare(image);
  InversionBundle b;
  b.result = clcae::invert(*encoder_, *generator_, img);
  const int n = generator_->num_styles();
  auto w_plus = b.result.w_plus.rows.unsqueeze(0);
  b.rec_w = {generator_->synthesize(broadcast(b.result.w.values.unsqueeze(0), n), std::nullopt, false)
                 .image.squeeze(0)};
  b.rec_wplus = {generator_->synthesize(w_plus, std::nullopt, false).image.squeeze(0)};
  b.rec_f = {generator_->synthesize(w_plus, b.result.f.values.unsqueeze(0), false).image.squeeze(0)};
  b.psnr_w = psnr(img, b.rec_w);
  b.psnr_wplus = psnr(img, b.rec_wplus);
  b.psnr_f = psnr(img, b.rec_f);
  return b;
}

ImageTensor Workspace::edit(const InversionResult& result, const EditRequest& req) const {
  return edit_image(result, *generator_, directions_, req);
}

const ImageTensor& Workspace::reconstruction(const InversionBundle& bundle, EditMode mode) {
  return mode == EditMode::LatentOnly ? bundle.rec_wplus : bundle.rec_f;
}

}  // namespace clcae
