#include "metrics.hpp"

#include <cmath>

#include "errors.hpp"

namespace clcae {
namespace F = torch::nn::functional;

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.dim() != 4 || a.sizes() != b.sizes()) {
    throw ShapeError(std::string(what) + ": expected equal [B, C, H, W] shapes, got " + c10::str(a.sizes()) +
                     " and " + c10::str(b.sizes()));
  }
}

std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

torch::Tensor batch1(const ImageTensor& x) { return x.values.unsqueeze(0); }

}  // namespace

std::vector<double> psnr(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "psnr");
  torch::NoGradGuard no_grad;
  auto mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).flatten(1).mean(1);
  std::vector<double> out;
  for (double m : to_vector(mse)) {
    const double rmse = std::sqrt(m);
    out.push_back(rmse < 1e-10 ? kPsnrCapDb : std::min(kPsnrCapDb, 20.0 * std::log10(kPixelRange / rmse)));
  }
  return out;
}

std::vector<double> ssim(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "ssim");
  if (a.size(2) < kSsimWindow || a.size(3) < kSsimWindow) throw ShapeError("ssim: image smaller than the window");
  torch::NoGradGuard no_grad;
  auto x = a.to(torch::kFloat64), y = b.to(torch::kFloat64);
  auto mean = [](const torch::Tensor& t) {
    return F::avg_pool2d(t, F::AvgPool2dFuncOptions(kSsimWindow).stride(1));
  };
  const double c1 = std::pow(kSsimK1 * kPixelRange, 2), c2 = std::pow(kSsimK2 * kPixelRange, 2);
  auto mx = mean(x), my = mean(y);
  auto vx = mean(x * x) - mx * mx;
  auto vy = mean(y * y) - my * my;
  auto cxy = mean(x * y) - mx * my;
  auto map = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  return to_vector(map.flatten(1).mean(1));
}

std::vector<double> lpips_proxy(const torch::Tensor& a, const torch::Tensor& b, const PerceptualEmbedder& embedder) {
  check_pair(a, b, "lpips_proxy");
  torch::NoGradGuard no_grad;
  return to_vector(embedder.distance(a, b));
}

std::vector<double> id_sim(const torch::Tensor& a, const torch::Tensor& b, const PerceptualEmbedder& embedder) {
  check_pair(a, b, "id_sim");
  torch::NoGradGuard no_grad;
  return to_vector(embedder.identity_similarity(a, b).clamp(-1.0, 1.0));
}

double psnr(const ImageTensor& a, const ImageTensor& b) { return psnr(batch1(a), batch1(b)).front(); }
double ssim(const ImageTensor& a, const ImageTensor& b) { return ssim(batch1(a), batch1(b)).front(); }
double lpips_proxy(const ImageTensor& a, const ImageTensor& b, const PerceptualEmbedder& embedder) {
  return lpips_proxy(batch1(a), batch1(b), embedder).front();
}
double id_sim(const ImageTensor& a, const ImageTensor& b, const PerceptualEmbedder& embedder) {
  return id_sim(batch1(a), batch1(b), embedder).front();
}

}  // namespace clcae
