#pragma once

#include <torch/torch.h>

#include "perceptual.hpp"
#include "types.hpp"

namespace clcae {

inline constexpr double kPsnrCapDb = 100.0;
inline constexpr double kPixelRange = 2.0;  // images live in [-1, 1]

// Batched metrics take [B, 3, R, R] pairs and return one double per image.
std::vector<double> psnr(const torch::Tensor& a, const torch::Tensor& b);
std::vector<double> ssim(const torch::Tensor& a, const torch::Tensor& b);
std::vector<double> lpips_proxy(const torch::Tensor& a, const torch::Tensor& b, const PerceptualEmbedder& embedder);
std::vector<double> id_sim(const torch::Tensor& a, const torch::Tensor& b, const PerceptualEmbedder& embedder);

double psnr(const ImageTensor& a, const ImageTensor& b);
double ssim(const ImageTensor& a, const ImageTensor& b);
double lpips_proxy(const ImageTensor& a, const ImageTensor& b, const PerceptualEmbedder& embedder);
double id_sim(const ImageTensor& a, const ImageTensor& b, const PerceptualEmbedder& embedder);

// Single-scale SSIM constants: uniform 7x7 window, k1 = 0.01, k2 = 0.03.
inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

}  // namespace clcae
