#include "evalsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "errors.hpp"

namespace clcae {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Restores the intra-op thread count on scope exit.
class SingleThreadScope {
 public:
  SingleThreadScope() : saved_(torch::get_num_threads()) { torch::set_num_threads(1); }
  ~SingleThreadScope() { torch::set_num_threads(saved_); }
  SingleThreadScope(const SingleThreadScope&) = delete;
  SingleThreadScope& operator=(const SingleThreadScope&) = delete;

 private:
  int saved_;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

const MetricRow& MetricReport::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw NotFoundError("no report row named '" + name + "'");
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "method,psnr,ssim,lpips_proxy,id_sim,seconds_per_image,samples,status\n";
  for (const auto& r : rows) {
    out << r.name << ',' << fixed(r.psnr, 4) << ',' << fixed(r.ssim, 4) << ',' << fixed(r.lpips_proxy, 4) << ','
        << fixed(r.id_sim, 4) << ',' << fixed(r.seconds_per_image, 6) << ',' << r.samples << ',' << r.status << '\n';
  }
  return out.str();
}

Json MetricReport::to_json() const {
  Json rows_json = Json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"method", r.name},
                         {"psnr", r.psnr},
                         {"ssim", r.ssim},
                         {"lpips_proxy", r.lpips_proxy},
                         {"id_sim", r.id_sim},
                         {"seconds_per_image", r.seconds_per_image},
                         {"samples", r.samples},
                         {"status", r.status}});
  }
  return {{"rows", rows_json},
          {"sample_count", sample_count},
          {"seed", seed},
          {"timed", timed},
          {"reference", published_reference()}};
}

std::string MetricReport::to_markdown() const {
  std::ostringstream out;
  out << "| Method | PSNR | SSIM | LPIPS (proxy) | ID (proxy) | Time (s) |\n";
  out << "|---|---:|---:|---:|---:|---:|\n";
  for (const auto& r : rows) {
    if (r.status != "ok") {
      out << "| " << r.name << " | " << r.status << " | | | | |\n";
      continue;
    }
    out << "| " << r.name << " | " << fixed(r.psnr, 2) << " | " << fixed(r.ssim, 3) << " | " << fixed(r.lpips_proxy, 3)
        << " | " << fixed(r.id_sim, 3) << " | " << (timed ? fixed(r.seconds_per_image, 4) : "-") << " |\n";
  }
  out << "\n" << sample_count << " images, seed " << seed << ".\n";
  return out.str();
}

void MetricReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << text;
  };
  put("report.csv", to_csv());
  put("report.json", to_json().dump(2) + "\n");
  put("report.md", to_markdown());
}

Json published_reference() {
  return {{"note", "full-scale 1024px face-domain values; not comparable with toy-scale rows"},
          {"clcae", {{"psnr", 24.50}, {"ssim", 0.68}, {"lpips", 0.06}, {"id", 0.79}, {"seconds_per_image", 0.080}}},
          {"ablation_psnr",
           {{"Optimization", 16.95},
            {"CLCAE_w w/o L_align", 18.15},
            {"CLCAE_w", 19.36},
            {"CLCAE_w+ w/o W+-attention", 20.61},
            {"CLCAE_w+", 21.23},
            {"CLCAE w/o F-attention", 23.93},
            {"CLCAE", 24.50}}},
          {"ablation_seconds_per_image", {{"Optimization", 193.50}, {"CLCAE_w", 0.022}, {"CLCAE", 0.080}}}};
}

MetricReport evaluate(const std::vector<Variant>& variants, const torch::Tensor& images,
                      const PerceptualEmbedder& embedder, const EvalOptions& options) {
  if (images.dim() != 4 || images.size(0) == 0) throw EmptyBatchError("evaluate: dataset is empty");
  if (options.batch_size < 1 || options.repetitions < 1 || options.timing_images < 1) {
    throw ConfigError("evaluate: batch_size, repetitions and timing_images must be positive");
  }
  MetricReport report;
  report.sample_count = images.size(0);
  report.seed = options.seed;
  report.timed = options.timing;
  const auto n = images.size(0);

  for (const auto& v : variants) {
    MetricRow row;
    row.name = v.name;
    if (!v.invert) {
      row.status = "untrained";
      report.rows.push_back(row);
      continue;
    }
    try {
      torch::NoGradGuard no_grad;
      double sp = 0, ss = 0, sl = 0, si = 0;
      for (std::int64_t s = 0; s < n; s += options.batch_size) {
        auto batch = images.narrow(0, s, std::min<std::int64_t>(options.batch_size, n - s));
        auto rec = v.invert(batch);
        for (double x : psnr(batch, rec)) sp += x;
        for (double x : ssim(batch, rec)) ss += x;
        for (double x : lpips_proxy(batch, rec, embedder)) sl += x;
        for (double x : id_sim(batch, rec, embedder)) si += x;
      }
      const auto count = static_cast<double>(n);
      row.psnr = sp / count;
      row.ssim = ss / count;
      row.lpips_proxy = sl / count;
      row.id_sim = si / count;
      row.samples = n;

      if (options.timing) {
        SingleThreadScope single;
        const int reps = v.timing_repetitions > 0 ? v.timing_repetitions : options.repetitions;
        const auto timed_images = std::min<std::int64_t>(v.timing_images > 0 ? v.timing_images : options.timing_images, n);
        v.invert(images.narrow(0, 0, 1));  // warm-up
        std::vector<double> per_image;
        for (int r = 0; r < reps; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          for (std::int64_t i = 0; i < timed_images; ++i) v.invert(images.narrow(0, i, 1));
          const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
          per_image.push_back(dt.count() / static_cast<double>(timed_images));
        }
        row.seconds_per_image = median(per_image);
      }
      for (double x : {row.psnr, row.ssim, row.lpips_proxy, row.id_sim, row.seconds_per_image}) {
        if (!std::isfinite(x)) throw TrainingError("non-finite metric", 0);
      }
    } catch (const std::exception& e) {
      row = MetricRow{};
      row.name = v.name;
      row.status = std::string("failed: ") + e.what();
    }
    report.rows.push_back(row);
  }
  return report;
}

Inverter encoder_inverter(std::shared_ptr<const Encoder> encoder, std::shared_ptr<const Generator> generator,
                          InversionLevel level) {
  return [encoder = std::move(encoder), generator = std::move(generator), level](const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    auto out = encoder->forward(images, level);
    switch (level) {
      case InversionLevel::W:
        return generator->synthesize(broadcast(out.w, generator->num_styles()), std::nullopt, false).image;
      case InversionLevel::WPlus:
        return generator->synthesize(out.w_plus, std::nullopt, false).image;
      case InversionLevel::Full:
        break;
    }
    return generator->synthesize(out.w_plus, out.f, false).image;
  };
}

Inverter optimization_inverter(std::shared_ptr<const Generator> generator,
                               std::shared_ptr<const PerceptualEmbedder> embedder, OptimizeConfig cfg) {
  return [generator = std::move(generator), embedder = std::move(embedder), cfg](const torch::Tensor& images) {
    auto r = optimize_w(images, *generator, *embedder, cfg);
    torch::NoGradGuard no_grad;
    return generator->synthesize(broadcast(r.w, generator->num_styles()), std::nullopt, false).image;
  };
}

const std::vector<std::string>& ablation_row_names() {
  static const std::vector<std::string> names = {"Optimization",
                                                 "CLCAE_w w/o L_align",
                                                 "CLCAE_w",
                                                 "CLCAE_w+ w/o W+-attention",
                                                 "CLCAE_w+",
                                                 "CLCAE w/o F-attention",
                                                 "CLCAE"};
  return names;
}

MetricReport ablate(std::shared_ptr<const Generator> generator, const AblationModels& models,
                    const torch::Tensor& images, std::shared_ptr<const PerceptualEmbedder> embedder,
                    const OptimizeConfig& optimize, const EvalOptions& options) {
  auto inv = [&](const std::shared_ptr<const Encoder>& enc, InversionLevel level) -> Inverter {
    return enc ? encoder_inverter(enc, generator, level) : Inverter{};
  };
  const auto& names = ablation_row_names();
  std::vector<Variant> variants = {
      {names[0], optimization_inverter(generator, embedder, optimize), 1, 1},
      {names[1], inv(models.no_align, InversionLevel::W)},
      {names[2], inv(models.full, InversionLevel::W)},
      {names[3], inv(models.no_wplus_attention, InversionLevel::WPlus)},
      {names[4], inv(models.full, InversionLevel::WPlus)},
      {names[5], inv(models.no_f_attention, InversionLevel::Full)},
      {names[6], inv(models.full, InversionLevel::Full)},
  };
  return evaluate(variants, images, *embedder, options);
}

}  // namespace clcae
