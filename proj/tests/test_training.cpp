#include "doctest_torch.hpp"

#include <fstream>

#include "errors.hpp"
#include "nn_util.hpp"
#include "oracles.hpp"
#include "test_support.hpp"
#include "training.hpp"

using namespace clcae;
using testing_support::tiny_encoder;
using testing_support::tiny_generator;

namespace {

// One 1x1 convolution picking the first two channels; identity head.
PerceptualEmbedder two_channel_embedder() {
  auto w = torch::zeros({2, 3, 1, 1});
  w[0][0][0][0] = 1.0;
  w[1][1][0][0] = 1.0;
  return PerceptualEmbedder({{w, torch::zeros({2}), 1, false}}, {0}, torch::eye(2));
}

torch::Tensor constant_image(int b, double c0, double c1, double c2, int res = 8) {
  auto img = torch::empty({b, 3, res, res});
  img.select(1, 0).fill_(c0);
  img.select(1, 1).fill_(c1);
  img.select(1, 2).fill_(c2);
  return img;
}

AlignConfig tiny_align() {
  AlignConfig c;
  c.embed_dim = 8;
  c.latent_tokens = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.image_channels = 4;
  c.image_max_channels = 8;
  c.image_feature_dim = 8;
  return c;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("default weights") {
    LossWeights w;
    CHECK(w.rec == 1.0);
    CHECK(w.id == 0.1);
    CHECK(w.freg == 0.01);
    CHECK(w.align == 1.0);
    CHECK(w.effective_freg(100) == doctest::Approx(1e-4));
    w.freg_per_element = false;
    CHECK(w.effective_freg(100) == 0.01);
  }

  TEST_CASE("reconstruction loss arithmetic") {
    PerceptualEmbedder emb;
    auto images = torch::rand({2, 3, 16, 16}) * 2 - 1;
    Reconstructions same{images, images, images};
    CHECK(std::abs(rec_loss(images, same, emb, LossWeights{}).item<double>()) <= 1e-9);
    CHECK(std::abs(id_loss(images, same, emb).item<double>()) <= 1e-6);

    LossWeights no_lpips;
    no_lpips.lpips = 0.0;
    Reconstructions shifted{images + 0.5, images, images};
    CHECK(rec_loss(images, shifted, emb, no_lpips).item<double>() == doctest::Approx(0.25).epsilon(1e-6));
    no_lpips.l2 = 2.0;
    CHECK(rec_loss(images, shifted, emb, no_lpips).item<double>() == doctest::Approx(0.5).epsilon(1e-6));
  }

  TEST_CASE("identity loss bounds and orthogonal case") {
    auto emb = two_channel_embedder();
    auto images = constant_image(2, 1.0, 0.0, 0.0);
    auto other = constant_image(2, 0.0, 1.0, 0.0);
    CHECK(id_loss(images, {other, other, other}, emb).item<double>() == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(id_loss(images, {-images, -images, -images}, emb).item<double>() == doctest::Approx(6.0).epsilon(1e-6));
    PerceptualEmbedder proxy;
    auto a = torch::rand({4, 3, 16, 16}) * 2 - 1;
    const double v = id_loss(a, {torch::rand_like(a), -a, a}, proxy).item<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 6.0);
  }

  TEST_CASE("feature regularizer") {
    Generator gen(tiny_generator());
    auto wp = torch::randn({3, 6, 8});
    auto f = gen.layer_feature(wp, 3);
    CHECK(f_reg_loss(f, gen, wp).item<double>() == 0.0);
    CHECK(f_reg_loss(f + 1.0, gen, wp).item<double>() == doctest::Approx(static_cast<double>(f[0].numel())));
    CHECK(f_reg_loss(torch::randn_like(f), f).item<double>() >= 0.0);
    CHECK_THROWS_AS(f_reg_loss(f, f[0]), ShapeError);
  }

  TEST_CASE("total loss components add up") {
    auto gc = tiny_generator();
    Generator gen(gc);
    Encoder enc(tiny_encoder(gc), gen.w_mean());
    auto align = std::make_shared<AlignModel>(tiny_align(), 16, 8);
    freeze(*align);
    PerceptualEmbedder emb;
    auto images = sample_pairs(gen, 4, 5).images;
    auto out = enc.forward(images);
    LossWeights w;
    auto c = total_loss(images, out, gen, align.get(), emb, w);
    const double freg_w = w.effective_freg(out.f[0].numel());
    const double sum = w.rec * c.rec.item<double>() + w.id * c.id.item<double>() + freg_w * c.freg.item<double>() +
                       w.align * c.align.item<double>();
    CHECK(c.total.item<double>() == doctest::Approx(sum).epsilon(1e-6));

    LossWeights zero{0, 0, 0, 0, 0.2, 1.0};
    CHECK(total_loss(images, out, gen, nullptr, emb, zero).total.item<double>() == 0.0);
    CHECK_THROWS_AS(total_loss(images, out, gen, nullptr, emb, w), ConfigError);
  }

  TEST_CASE("loss gradient matches central differences") {
    // Double precision end to end: perturb the encoder's outputs directly.
    auto gc = tiny_generator();
    Generator gen(gc);
    Encoder enc(tiny_encoder(gc), gen.w_mean());
    PerceptualEmbedder emb;
    auto images = sample_pairs(gen, 2, 6).images.to(torch::kFloat64);
    EncoderOutput base;
    {
      torch::NoGradGuard ng;
      auto out = enc.forward(images.to(torch::kFloat32));
      base.w = out.w.to(torch::kFloat64) + 0.1 * torch::randn({2, 8}, torch::kFloat64);
      base.w_plus = out.w_plus.to(torch::kFloat64) + 0.1 * torch::randn({2, 6, 8}, torch::kFloat64);
      base.f = out.f.to(torch::kFloat64) + 0.1 * torch::randn_like(out.f, torch::kFloat64);
    }
    LossWeights w;
    w.align = 0.0;
    auto eval = [&](const EncoderOutput& o) { return total_loss(images, o, gen, nullptr, emb, w).total; };

    EncoderOutput live{base.w.clone().requires_grad_(true), {}, base.w_plus.clone().requires_grad_(true),
                       base.f.clone().requires_grad_(true), {}};
    eval(live).backward();
    const double h = 1e-6;
    torch::manual_seed(16);
    for (int trial = 0; trial < 12; ++trial) {
      const int which = trial % 3;
      auto& target = which == 0 ? base.w : (which == 1 ? base.w_plus : base.f);
      const auto& grad = which == 0 ? live.w.grad() : (which == 1 ? live.w_plus.grad() : live.f.grad());
      const auto idx = torch::randint(target.numel(), {1}).item<std::int64_t>();
      auto plus = base, minus = base;
      auto& tp = which == 0 ? plus.w : (which == 1 ? plus.w_plus : plus.f);
      auto& tm = which == 0 ? minus.w : (which == 1 ? minus.w_plus : minus.f);
      tp = target.clone();
      tm = target.clone();
      tp.view({-1})[idx] += h;
      tm.view({-1})[idx] -= h;
      const double fd = (eval(plus).item<double>() - eval(minus).item<double>()) / (2 * h);
      CHECK(oracle::rel_err(grad.reshape({-1})[idx].item<double>(), fd, 1e-4) < 1e-4);
    }
  }

  TEST_CASE("short run is deterministic and writes a history") {
    auto gc = tiny_generator();
    Generator gen(gc);
    auto data = sample_pairs(gen, 64, 7, 0.25);
    PerceptualEmbedder emb;
    TrainConfig tc;
    tc.steps = 6;
    tc.batch_size = 4;
    tc.val_every = 3;
    tc.val_samples = 8;
    tc.weights.align = 0.0;
    auto a = train_encoder(gen, nullptr, emb, data, tiny_encoder(gc), tc);
    auto b = train_encoder(gen, nullptr, emb, data, tiny_encoder(gc), tc);
    REQUIRE(a.history.size() == 6);
    CHECK(a.history[5].total == b.history[5].total);
    CHECK(std::isnan(a.history[0].val_psnr_w));
    CHECK(std::isfinite(a.history[2].val_psnr_f));
    CHECK(is_frozen(*a.encoder));

    testing_support::TempDir dir("hist");
    write_train_history_csv(dir.path() / "h.csv", a.history);
    std::ifstream in(dir.path() / "h.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "step,l_rec,l_id,l_freg,l_align,total,val_psnr_w,val_psnr_wplus,val_psnr_f");
    CHECK(first.substr(first.size() - 3) == ",,,");
  }
}
