#include "doctest_torch.hpp"

#include "checkpoint.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "test_support.hpp"

using namespace clcae;
using testing_support::tiny_encoder;
using testing_support::tiny_generator;

TEST_SUITE("encoder") {
  TEST_CASE("pyramid and output shapes") {
    auto gc = tiny_generator();
    Generator gen(gc);
    Encoder enc(tiny_encoder(gc), gen.w_mean());
    torch::NoGradGuard ng;
    auto images = torch::rand({2, 3, 16, 16}) * 2 - 1;
    auto pyr = enc.extract_pyramid(images);
    CHECK(pyr.t1.sizes() == torch::IntArrayRef({2, 16, 2, 2}));
    CHECK(pyr.t2.size(2) == 4);
    CHECK(pyr.t3.sizes() == torch::IntArrayRef({2, 8, 8, 8}));
    auto out = enc.forward(images);
    CHECK(out.w.sizes() == torch::IntArrayRef({2, 8}));
    CHECK(out.w_plus.sizes() == torch::IntArrayRef({2, 6, 8}));
    CHECK(out.f.sizes() == torch::IntArrayRef({2, 8, 8, 8}));
    CHECK(torch::equal(out.w, enc.forward(images).w));

    auto w_only = enc.forward(images, InversionLevel::W);
    CHECK(torch::equal(w_only.w, out.w));
    CHECK(!w_only.f.defined());
  }

  TEST_CASE("distinct images give distinct T3") {
    auto gc = tiny_generator();
    Encoder enc(tiny_encoder(gc), torch::zeros({8}));
    torch::NoGradGuard ng;
    auto a = enc.extract_pyramid(torch::rand({4, 3, 16, 16}) * 2 - 1).t3;
    auto b = enc.extract_pyramid(torch::rand({4, 3, 16, 16}) * 2 - 1).t3;
    CHECK(((a - b).abs().flatten(1).amax(1) > 1e-6).all().item<bool>());
  }

  TEST_CASE("init state reproduces the w reconstruction from w+") {
    auto gc = tiny_generator();
    Generator gen(gc);
    Encoder enc(tiny_encoder(gc, 3), gen.w_mean());
    torch::NoGradGuard ng;
    auto images = sample_pairs(gen, 20, 1).images;
    auto out = enc.forward(images);
    auto from_w = gen.synthesize(broadcast(out.w, 6), std::nullopt, false).image;
    auto from_wp = gen.synthesize(out.w_plus, std::nullopt, false).image;
    CHECK((from_w - from_wp).abs().max().item<double>() <= 1e-6);
  }

  TEST_CASE("zeroed style heads give a zero coarse residual") {
    auto gc = tiny_generator();
    Encoder enc(tiny_encoder(gc), torch::zeros({8}));
    torch::NoGradGuard ng;
    for (auto& head : enc.coarse_heads()) {
      head->head()->weight.zero_();
      head->head()->bias.zero_();
    }
    auto pyr = enc.extract_pyramid(torch::rand({2, 3, 16, 16}));
    CHECK(torch::equal(enc.coarse_residuals(pyr), torch::zeros({2, 6, 8})));
  }

  TEST_CASE("disabled attention falls back to plain addition") {
    auto gc = tiny_generator();
    auto cfg = tiny_encoder(gc);
    cfg.use_wplus_attention = false;
    cfg.use_f_attention = false;
    Encoder enc(cfg, torch::zeros({8}));
    torch::NoGradGuard ng;
    auto w = torch::randn({2, 8});
    auto delta = torch::randn({2, 6, 8});
    CHECK(torch::equal(enc.wplus_attention(w, delta), w.unsqueeze(1) + delta));
    auto t3 = torch::randn({2, 8, 8, 8});
    CHECK(torch::equal(enc.f_head_input(t3, w), t3));
  }

  TEST_CASE("single image inversion and checkpoint round trip") {
    auto gc = tiny_generator();
    Generator gen(gc);
    auto enc = std::make_shared<Encoder>(tiny_encoder(gc, 4), gen.w_mean());
    auto image = ImageTensor{sample_pairs(gen, 1, 2).images[0]};
    auto r = invert(*enc, gen, image);
    CHECK(r.w.values.sizes() == torch::IntArrayRef({8}));
    CHECK(r.w_plus.rows.sizes() == torch::IntArrayRef({6, 8}));
    CHECK(r.f.layer_index == 3);

    testing_support::TempDir dir("enc");
    enc->save(dir.path());
    auto back = Encoder::load(dir.path());
    auto r2 = invert(*back, gen, image);
    CHECK(torch::equal(r.f.values, r2.f.values));
    CHECK(parameter_checksum(*enc) == parameter_checksum(*back));

    auto other = tiny_generator();
    other.latent_dim = 4;
    Generator mismatched(other);
    CHECK_THROWS_AS(invert(*enc, mismatched, image), ConfigError);
  }

  TEST_CASE("bad inputs") {
    auto gc = tiny_generator();
    Encoder enc(tiny_encoder(gc), torch::zeros({8}));
    CHECK_THROWS_AS(enc.forward(torch::zeros({1, 3, 8, 8})), ShapeError);
    auto cfg = tiny_encoder(gc);
    cfg.backbone_channels = {8};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(EncoderConfig::from_json(Json{{"unknown", 1}}), ConfigError);
  }
}
