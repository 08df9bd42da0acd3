#include "editing.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "checkpoint.hpp"
#include "errors.hpp"

namespace clcae {

std::string to_string(DirectionMethod m) { return m == DirectionMethod::Svm ? "svm" : "pca"; }

std::string to_string(EditMode m) { return m == EditMode::LatentOnly ? "latent_only" : "latent_and_feature"; }

DirectionMethod direction_method_from_string(const std::string& s) {
  if (s == "svm") return DirectionMethod::Svm;
  if (s == "pca") return DirectionMethod::Pca;
  throw ConfigError("unknown direction method '" + s + "' (expected svm or pca)");
}

EditMode edit_mode_from_string(const std::string& s) {
  if (s == "latent_only") return EditMode::LatentOnly;
  if (s == "latent_and_feature") return EditMode::LatentAndFeature;
  throw ConfigError("unknown edit mode '" + s + "' (expected latent_only or latent_and_feature)");
}

namespace {

torch::Tensor check_latents(const torch::Tensor& latents, const char* what) {
  if (latents.dim() != 2 || latents.size(0) == 0 || latents.size(1) == 0) {
    throw ShapeError(std::string(what) + ": latents must be [n, d], got " + c10::str(latents.sizes()));
  }
  return latents.detach().to(torch::kFloat64).contiguous();
}

}  // namespace

double projection_sigma(const torch::Tensor& latents, const torch::Tensor& vector) {
  auto x = check_latents(latents, "projection_sigma");
  auto proj = torch::matmul(x, vector.detach().to(torch::kFloat64));
  return proj.std(/*unbiased=*/false).item<double>();
}

Direction fit_svm_direction(const torch::Tensor& latents, const std::vector<int>& labels, const std::string& name,
                            const SvmConfig& cfg) {
  auto x = check_latents(latents, "fit_svm_direction");
  const auto n = x.size(0), d = x.size(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw LabelError("fit_svm_direction: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " latents");
  }
  std::int64_t pos = 0, neg = 0;
  for (int y : labels) {
    if (y == 1) ++pos;
    else if (y == -1) ++neg;
    else throw LabelError("fit_svm_direction: labels must be +1 or -1");
  }
  if (pos < 2 || neg < 2) throw LabelError("fit_svm_direction: need at least two samples of each class");
  if (!(cfg.c > 0.0) || cfg.max_epochs < 1 || !(cfg.tolerance > 0.0)) throw ConfigError("bad SVM configuration");

  const double* xp = x.data_ptr<double>();
  const double upper = cfg.c / static_cast<double>(n);
  const auto dim = d + 1;  // constant bias feature
  std::vector<double> w(static_cast<std::size_t>(dim), 0.0), alpha(static_cast<std::size_t>(n), 0.0),
      qii(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 1.0;
    for (std::int64_t j = 0; j < d; ++j) s += xp[i * d + j] * xp[i * d + j];
    qii[i] = s;
  }
  int epochs = 0;
  for (; epochs < cfg.max_epochs; ++epochs) {
    double pg_max = -INFINITY, pg_min = INFINITY;
    for (std::int64_t i = 0; i < n; ++i) {
      const double y = labels[i];
      const double* xi = xp + i * d;
      double dot = w[d];
      for (std::int64_t j = 0; j < d; ++j) dot += w[j] * xi[j];
      const double g = y * dot - 1.0;
      double pg = g;
      if (alpha[i] == 0.0) pg = std::min(g, 0.0);
      else if (alpha[i] == upper) pg = std::max(g, 0.0);
      pg_max = std::max(pg_max, pg);
      pg_min = std::min(pg_min, pg);
      if (pg == 0.0) continue;
      const double old = alpha[i];
      alpha[i] = std::clamp(old - g / qii[i], 0.0, upper);
      const double step = (alpha[i] - old) * y;
      for (std::int64_t j = 0; j < d; ++j) w[j] += step * xi[j];
      w[d] += step;
    }
    if (pg_max - pg_min < cfg.tolerance) break;
  }
  auto weight = torch::tensor(std::vector<double>(w.begin(), w.begin() + d), torch::kFloat64);
  const double norm = weight.norm().item<double>();
  if (!(norm > 0.0)) throw LabelError("fit_svm_direction: degenerate solution (zero weight vector)");
  weight = weight / norm;

  std::int64_t support = 0;
  for (double a : alpha) support += a > 0.0;
  Direction dir;
  dir.name = name;
  dir.method = DirectionMethod::Svm;
  dir.vector = weight.to(torch::kFloat32);
  dir.sigma = projection_sigma(x, weight);
  dir.metadata = {{"training_size", n},  {"positives", pos},         {"margin", 1.0 / norm},
                  {"bias", w[d] / norm}, {"support_vectors", support}, {"epochs", epochs}};
  return dir;
}

std::vector<Direction> fit_pca_directions(const torch::Tensor& latents, int k, const std::string& name_prefix) {
  auto x = check_latents(latents, "fit_pca_directions");
  const auto n = x.size(0), d = x.size(1);
  if (k < 1 || k > d) throw RangeError("fit_pca_directions: k must lie in [1, " + std::to_string(d) + "]");
  if (n < k + 1) throw RankError("fit_pca_directions: need at least k + 1 samples");
  auto centered = x - x.mean(0, true);
  auto cov = torch::matmul(centered.t(), centered) / static_cast<double>(n - 1);
  auto [evals, evecs] = torch::linalg_eigh(cov);  // ascending
  const double top = evals[d - 1].item<double>();
  std::vector<Direction> out;
  for (int i = 0; i < k; ++i) {
    const auto col = d - 1 - i;
    const double lambda = evals[col].item<double>();
    if (!(lambda > 1e-10 * std::max(top, 1e-300))) {
      throw RankError("fit_pca_directions: centered latents have rank " + std::to_string(i) + " < k = " +
                      std::to_string(k));
    }
    auto v = evecs.select(1, col).clone();
    const auto arg = v.abs().argmax().item<std::int64_t>();
    if (v[arg].item<double>() < 0.0) v = -v;
    Direction dir;
    dir.name = name_prefix + std::to_string(i);
    dir.method = DirectionMethod::Pca;
    dir.vector = v.to(torch::kFloat32);
    dir.sigma = projection_sigma(x, v);
    dir.metadata = {{"training_size", n}, {"eigenvalue", lambda}, {"component", i}};
    out.push_back(std::move(dir));
  }
  return out;
}

std::vector<int> synthetic_attribute_labels(const torch::Tensor& latents, std::uint64_t seed) {
  auto x = check_latents(latents, "synthetic_attribute_labels");
  auto rng = make_rng(seed);
  auto u = torch::randn({x.size(1)}, rng).to(torch::kFloat64);
  u = u / u.norm();
  auto proj = torch::matmul(x, u);
  const double median = proj.median().item<double>();
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(x.size(0)));
  auto acc = proj.accessor<double, 1>();
  for (std::int64_t i = 0; i < x.size(0); ++i) labels.push_back(acc[i] > median ? 1 : -1);
  return labels;
}

torch::Tensor apply_latent_edit(const torch::Tensor& w_plus, const Direction& dir, double alpha) {
  if (!dir.vector.defined() || dir.vector.dim() != 1) throw ShapeError("direction vector must be [d]");
  if ((w_plus.dim() != 2 && w_plus.dim() != 3) || w_plus.size(-1) != dir.vector.size(0)) {
    throw ShapeError("apply_latent_edit: w+ " + c10::str(w_plus.sizes()) + " vs direction of length " +
                     std::to_string(dir.vector.size(0)));
  }
  return w_plus + (alpha * dir.sigma) * dir.vector.to(w_plus.dtype());
}

LatentWPlus apply_latent_edit(const LatentWPlus& w_plus, const Direction& dir, double alpha) {
  return {apply_latent_edit(w_plus.rows, dir, alpha)};
}

torch::Tensor feature_edit(const torch::Tensor& f, const Generator& generator, const torch::Tensor& w_plus,
                           const torch::Tensor& edited_w_plus) {
  if (w_plus.sizes() != edited_w_plus.sizes()) {
    throw ShapeError("feature_edit: w+ " + c10::str(w_plus.sizes()) + " vs edited " + c10::str(edited_w_plus.sizes()));
  }
  const int k = generator.f_layer();
  auto before = generator.layer_feature(w_plus, k);
  if (f.sizes() != before.sizes()) {
    throw ShapeError("feature_edit: f " + c10::str(f.sizes()) + " does not match layer " + std::to_string(k) + " " +
                     c10::str(before.sizes()));
  }
  return f + (generator.layer_feature(edited_w_plus, k) - before);
}

FeatureMap feature_edit(const FeatureMap& f, const Generator& generator, const LatentWPlus& w_plus,
                        const LatentWPlus& edited_w_plus) {
  if (f.layer_index != generator.f_layer()) {
    throw ShapeError("feature_edit: feature map is from layer " + std::to_string(f.layer_index) + ", expected " +
                     std::to_string(generator.f_layer()));
  }
  auto out = feature_edit(f.values.unsqueeze(0), generator, w_plus.rows.unsqueeze(0), edited_w_plus.rows.unsqueeze(0));
  return {out.squeeze(0), f.layer_index};
}

// ---------------------------------------------------------------------------

DirectionStore::DirectionStore(std::vector<Direction> directions) {
  for (auto& d : directions) add(std::move(d));
}

void DirectionStore::add(Direction dir) {
  if (dir.name.empty()) throw ConfigError("direction name must not be empty");
  for (char ch : dir.name) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '-') {
      throw ConfigError("direction name '" + dir.name + "' may only contain letters, digits, '_' and '-'");
    }
  }
  if (!dir.vector.defined() || dir.vector.dim() != 1) throw ShapeError("direction vector must be [d]");
  const double norm = dir.vector.to(torch::kFloat64).norm().item<double>();
  if (std::abs(norm - 1.0) > 1e-6) throw RangeError("direction '" + dir.name + "' is not unit length");
  for (auto& existing : directions_) {
    if (existing.name == dir.name) {
      existing = std::move(dir);
      return;
    }
  }
  directions_.push_back(std::move(dir));
}

const Direction& DirectionStore::find(const std::string& name) const {
  for (const auto& d : directions_) {
    if (d.name == name) return d;
  }
  throw NotFoundError("unknown direction '" + name + "'");
}

bool DirectionStore::contains(const std::string& name) const {
  return std::any_of(directions_.begin(), directions_.end(), [&](const Direction& d) { return d.name == name; });
}

void DirectionStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  Json arr = Json::array();
  for (const auto& d : directions_) {
    const auto file = d.name + ".f32";
    write_f32_blob(dir / file, d.vector);
    arr.push_back({{"name", d.name},
                   {"space", d.space},
                   {"method", to_string(d.method)},
                   {"sigma", d.sigma},
                   {"vector", {{"file", file}, {"shape", {d.vector.size(0)}}}},
                   {"metadata", d.metadata}});
  }
  std::ofstream out(dir / "directions.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "directions.json").string());
  out << arr.dump(2) << '\n';
}

DirectionStore DirectionStore::load(const std::filesystem::path& dir) {
  const auto path = dir / "directions.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  Json arr;
  try {
    arr = Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError("malformed " + path.string() + ": " + e.what());
  }
  if (!arr.is_array()) throw IoError(path.string() + " must hold a JSON array");
  DirectionStore store;
  try {
    for (const auto& e : arr) {
      Direction d;
      d.name = e.at("name").get<std::string>();
      d.space = e.value("space", "W");
      d.method = direction_method_from_string(e.at("method").get<std::string>());
      d.sigma = e.at("sigma").get<double>();
      d.metadata = e.value("metadata", Json::object());
      const auto& v = e.at("vector");
      d.vector = read_f32_blob(dir / v.at("file").get<std::string>(), v.at("shape").get<std::vector<std::int64_t>>());
      store.add(std::move(d));
    }
  } catch (const Json::exception& ex) {
    throw IoError("malformed " + path.string() + ": " + ex.what());
  }
  return store;
}

// ---------------------------------------------------------------------------

ImageTensor edit_image(const InversionResult& result, const Generator& generator, const Direction& dir,
                       double alpha, EditMode mode) {
  torch::NoGradGuard no_grad;
  auto w_plus = result.w_plus.rows.unsqueeze(0);
  auto edited = apply_latent_edit(w_plus, dir, alpha);
  if (mode == EditMode::LatentOnly) return {generator.synthesize(edited, std::nullopt, false).image.squeeze(0)};
  auto f_hat = feature_edit(result.f.values.unsqueeze(0), generator, w_plus, edited);
  return {generator.synthesize(edited, f_hat, false).image.squeeze(0)};
}

ImageTensor edit_image(const InversionResult& result, const Generator& generator, const DirectionStore& store,
                       const EditRequest& req) {
  return edit_image(result, generator, store.find(req.direction), req.alpha, req.mode);
}

}  // namespace clcae
