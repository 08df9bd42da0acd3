#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "checkpoint.hpp"
#include "generator.hpp"
#include "json_util.hpp"
#include "types.hpp"

namespace clcae {

struct EncoderConfig {
  int resolution = 64;
  int latent_dim = 128;
  int num_styles = 10;
  int heads = 4;
  // Each d-vector is split into this many tokens inside the attention blocks.
  int token_split = 1;
  int t3_resolution = 16;
  // One stride-2 stage per entry, from the input down to T1 (t3_resolution / 4).
  std::vector<int> backbone_channels = {16, 32, 64, 128};
  // Extra stride-1 convolutions after each stride-2 convolution.
  int stage_depth = 1;
  int map2style_channels = 64;
  int f_head_channels = 32;
  // F-space slot of the generator (layer k output).
  int f_layer = 5;
  int f_channels = 16;
  int f_resolution = 16;
  // Rows of the coarse residual predicted from T1 and T2; the rest come from T3.
  int coarse_rows = 3;
  int middle_rows = 4;
  bool use_wplus_attention = true;
  bool use_f_attention = true;
  std::uint64_t seed = 0;

  int t1_resolution() const { return t3_resolution / 4; }
  void validate() const;
  Json to_json() const;
  static EncoderConfig from_json(const Json& j);
  // Copies resolution, d, N and the F-space shape from the generator and sizes
  // the backbone for that resolution.
  static EncoderConfig for_generator(const GeneratorConfig& gen);
};

// Batched pyramid: T1 [B, c1, r/4, r/4], T2 [B, c2, r/2, r/2], T3 [B, d, r, r]
// with r = t3_resolution.
struct PyramidFeatures {
  torch::Tensor t1, t2, t3;
};

// Scaled dot-product cross-attention between vectors. Every d-vector of
// `query_src` [B, P, d] and `kv_src` [B, P or 1, d] is split into m tokens of
// d/m and each token into `heads` chunks; the tokens of query p attend to the
// tokens of key/value vector p (broadcast when kv_src has one row). Row-vector
// convention: q = x Wq. Returns the output-projected result [B, P, d]; when
// `weights` is given it receives the softmax matrix [B, P, heads, m, m].
torch::Tensor cross_attention(const torch::Tensor& query_src, const torch::Tensor& kv_src, const torch::Tensor& w_q,
                              const torch::Tensor& w_k, const torch::Tensor& w_v, const torch::Tensor& w_o,
                              int heads, int token_split, torch::Tensor* weights = nullptr);

enum class AttentionRole { WPlus, F };

class CrossAttentionBlockImpl : public torch::nn::Module {
 public:
  CrossAttentionBlockImpl(int dim, int heads, int token_split, AttentionRole role);

  torch::Tensor forward(const torch::Tensor& query_src, const torch::Tensor& kv_src,
                        torch::Tensor* weights = nullptr) const;

  int dim() const { return dim_; }
  int heads() const { return heads_; }
  int token_split() const { return token_split_; }
  AttentionRole role() const { return role_; }

  torch::Tensor w_q, w_k, w_v, w_o;

 private:
  int dim_, heads_, token_split_;
  AttentionRole role_;
};
TORCH_MODULE(CrossAttentionBlock);

// Stride-2 convolutions down to 1x1 followed by a linear map to `rows` style
// vectors.
class Map2StyleImpl : public torch::nn::Module {
 public:
  Map2StyleImpl(int in_channels, int in_resolution, int channels, int rows, int latent_dim);
  torch::Tensor forward(const torch::Tensor& x) const;  // -> [B, rows, d]
  torch::nn::Linear& head() { return linear_; }

 private:
  int rows_, latent_dim_;
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear linear_{nullptr};
};
TORCH_MODULE(Map2Style);

enum class InversionLevel { W, WPlus, Full };

struct EncoderOutput {
  torch::Tensor w;             // [B, d]
  torch::Tensor delta_w_plus;  // [B, N, d]
  torch::Tensor w_plus;        // [B, N, d]
  torch::Tensor f;             // [B, c, h, w]
  PyramidFeatures pyramid;
};

struct InversionResult {
  LatentW w;
  LatentWPlus w_plus;
  FeatureMap f;
  PyramidFeatures pyramid;  // batch dimension of one
  LatentWPlus delta_w_plus;
};

class Encoder : public torch::nn::Module {
 public:
  // `w_avg` [d] is the generator's mean w, added to the w head's output.
  Encoder(EncoderConfig cfg, torch::Tensor w_avg);

  const EncoderConfig& config() const { return cfg_; }

  PyramidFeatures extract_pyramid(const torch::Tensor& images) const;
  torch::Tensor predict_w(const torch::Tensor& t1) const;                // [B, d]
  torch::Tensor coarse_residuals(const PyramidFeatures& pyramid) const;  // [B, N, d]
  // w [B, d], delta [B, N, d] -> w+ [B, N, d].
  torch::Tensor wplus_attention(const torch::Tensor& w, const torch::Tensor& delta) const;
  // T3 + attention addend, before the spatial head.
  torch::Tensor f_head_input(const torch::Tensor& t3, const torch::Tensor& w) const;
  torch::Tensor f_attention(const torch::Tensor& t3, const torch::Tensor& w) const;

  // Computes only what `level` needs; unused fields stay undefined.
  EncoderOutput forward(const torch::Tensor& images, InversionLevel level = InversionLevel::Full) const;

  CrossAttentionBlock& wplus_block() { return wplus_block_; }
  CrossAttentionBlock& f_block() { return f_block_; }
  std::vector<Map2Style> coarse_heads() const { return coarse_heads_; }
  Map2Style& w_head() { return w_head_; }

  Checkpoint to_checkpoint() const;
  static std::shared_ptr<Encoder> from_checkpoint(const Checkpoint& ckpt);
  static std::shared_ptr<Encoder> load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

 private:
  void check_images(const torch::Tensor& images) const;

  EncoderConfig cfg_;
  std::vector<torch::nn::Conv2d> stages_;
  std::vector<std::vector<torch::nn::Conv2d>> stage_extra_;
  torch::nn::Conv2d lat2_{nullptr}, top1_{nullptr}, lat3_{nullptr}, top2_{nullptr};
  Map2Style w_head_{nullptr};
  std::vector<Map2Style> coarse_heads_;
  std::vector<int> coarse_split_;
  CrossAttentionBlock wplus_block_{nullptr}, f_block_{nullptr};
  std::vector<torch::nn::Conv2d> f_head_;
  torch::Tensor w_avg_;
};

// Single-image inversion. Checks that the encoder matches the generator.
InversionResult invert(const Encoder& encoder, const Generator& generator, const ImageTensor& image);

}  // namespace clcae
