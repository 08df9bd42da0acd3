#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "encoder.hpp"
#include "generator.hpp"
#include "json_util.hpp"
#include "types.hpp"

namespace clcae {

enum class DirectionMethod { Svm, Pca };
enum class EditMode { LatentOnly, LatentAndFeature };

std::string to_string(DirectionMethod m);
std::string to_string(EditMode m);
DirectionMethod direction_method_from_string(const std::string& s);
EditMode edit_mode_from_string(const std::string& s);

// Unit-length direction in W; sigma is the std of sampled w projected on it.
struct Direction {
  std::string name;
  std::string space = "W";
  torch::Tensor vector;  // [d], float32
  double sigma = 1.0;
  DirectionMethod method = DirectionMethod::Svm;
  Json metadata = Json::object();
};

struct EditRequest {
  std::string direction;
  double alpha = 0.0;  // in units of the direction's sigma
  EditMode mode = EditMode::LatentAndFeature;
};

struct SvmConfig {
  // Objective: 0.5 |w|^2 + c * mean_i hinge(y_i (w.x_i + b)); the bias is an
  // extra weight on a constant feature.
  double c = 100.0;
  int max_epochs = 2000;
  double tolerance = 1e-4;
};

// Linear SVM by dual coordinate descent over the samples in order.
// `latents` [n, d], labels +1/-1. Throws LabelError for bad labels or fewer
// than two samples per class.
Direction fit_svm_direction(const torch::Tensor& latents, const std::vector<int>& labels, const std::string& name,
                            const SvmConfig& cfg = {});

// Top-k principal axes of the mean-centered latents, each with the sign that
// makes its largest-magnitude coordinate positive. Throws RankError when the
// centered data has rank < k.
std::vector<Direction> fit_pca_directions(const torch::Tensor& latents, int k, const std::string& name_prefix = "pc");

// Population std of the latents projected onto `vector`.
double projection_sigma(const torch::Tensor& latents, const torch::Tensor& vector);

// Synthetic binary attribute: +1 where the projection of w on a fixed random
// unit vector (drawn from `seed`) exceeds its median over `latents`.
std::vector<int> synthetic_attribute_labels(const torch::Tensor& latents, std::uint64_t seed);

// w+ + alpha * sigma * direction on every row. Accepts [N, d] or [B, N, d].
torch::Tensor apply_latent_edit(const torch::Tensor& w_plus, const Direction& dir, double alpha);
LatentWPlus apply_latent_edit(const LatentWPlus& w_plus, const Direction& dir, double alpha);

// f + G_k(edited_w_plus) - G_k(w_plus), batched [B, ...].
torch::Tensor feature_edit(const torch::Tensor& f, const Generator& generator, const torch::Tensor& w_plus,
                           const torch::Tensor& edited_w_plus);
FeatureMap feature_edit(const FeatureMap& f, const Generator& generator, const LatentWPlus& w_plus,
                        const LatentWPlus& edited_w_plus);

class DirectionStore {
 public:
  DirectionStore() = default;
  explicit DirectionStore(std::vector<Direction> directions);

  // Replaces an existing direction of the same name.
  void add(Direction dir);
  const Direction& find(const std::string& name) const;  // NotFoundError
  bool contains(const std::string& name) const;
  const std::vector<Direction>& all() const { return directions_; }
  bool empty() const { return directions_.empty(); }

  // <dir>/directions.json plus one float32 blob per vector.
  void save(const std::filesystem::path& dir) const;
  static DirectionStore load(const std::filesystem::path& dir);

 private:
  std::vector<Direction> directions_;
};

// latent_only -> G(w+^); latent_and_feature -> G(w+^, f^).
ImageTensor edit_image(const InversionResult& result, const Generator& generator, const Direction& dir,
                       double alpha, EditMode mode);
ImageTensor edit_image(const InversionResult& result, const Generator& generator, const DirectionStore& store,
                       const EditRequest& req);

}  // namespace clcae
