#include "doctest_torch.hpp"

#include "encoder.hpp"
#include "errors.hpp"
#include "oracles.hpp"

using namespace clcae;

namespace {

struct Projections {
  torch::Tensor wq, wk, wv, wo;
};

Projections random_projections(int d) {
  auto opts = torch::kFloat64;
  return {torch::randn({d, d}, opts), torch::randn({d, d}, opts), torch::randn({d, d}, opts),
          torch::randn({d, d}, opts)};
}

double max_oracle_gap(const torch::Tensor& queries, const torch::Tensor& kv, const Projections& p, int heads, int m) {
  auto got = cross_attention(queries, kv, p.wq, p.wk, p.wv, p.wo, heads, m);
  const auto wq = oracle::to_mat(p.wq), wk = oracle::to_mat(p.wk), wv = oracle::to_mat(p.wv),
             wo = oracle::to_mat(p.wo);
  double gap = 0.0;
  for (int b = 0; b < queries.size(0); ++b) {
    for (int i = 0; i < queries.size(1); ++i) {
      const auto kv_row = kv.size(1) == 1 ? kv[b][0] : kv[b][i];
      const auto want = oracle::attention(oracle::to_vec(queries[b][i]), oracle::to_vec(kv_row), wq, wk, wv, wo,
                                          heads, m);
      const auto have = oracle::to_vec(got[b][i]);
      for (std::size_t c = 0; c < want.size(); ++c) gap = std::max(gap, std::abs(want[c] - have[c]));
    }
  }
  return gap;
}

EncoderConfig small_encoder() {
  GeneratorConfig gc;
  gc.resolution = 16;
  gc.latent_dim = 8;
  gc.channels = {{4, 8}, {8, 8}, {16, 4}};
  gc.f_layer = 3;
  auto c = EncoderConfig::for_generator(gc);
  c.heads = 2;
  c.coarse_rows = 1;
  c.middle_rows = 2;
  return c;
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("cross attention matches the loop oracle") {
    torch::manual_seed(11);
    for (int m : {1, 2, 4}) {
      for (int heads : {1, 2}) {
        const int d = 8;
        auto p = random_projections(d);
        auto q = torch::randn({2, 3, d}, torch::kFloat64);
        CHECK(max_oracle_gap(q, torch::randn({2, 3, d}, torch::kFloat64), p, heads, m) < 1e-9);
        CHECK(max_oracle_gap(q, torch::randn({2, 1, d}, torch::kFloat64), p, heads, m) < 1e-9);
      }
    }
  }

  TEST_CASE("hand-set two-token instance") {
    // d = 4, one head, two tokens of width 2; identity projections.
    auto eye = torch::eye(4, torch::kFloat64);
    auto q = torch::tensor({1.0, 0.0, 0.0, 1.0}, torch::kFloat64).reshape({1, 1, 4});
    auto kv = torch::tensor({2.0, 0.0, 0.0, 3.0}, torch::kFloat64).reshape({1, 1, 4});
    torch::Tensor weights;
    auto out = cross_attention(q, kv, eye, eye, eye, eye, 1, 2, &weights);
    const double s = 1.0 / std::sqrt(2.0);
    // Query token 0 = (1, 0) scores key tokens (2, 0) and (0, 3) as 2s and 0.
    const double p00 = 1.0 / (1.0 + std::exp(-2.0 * s));
    // Query token 1 = (0, 1) scores them as 0 and 3s.
    const double p11 = 1.0 / (1.0 + std::exp(-3.0 * s));
    auto expect = torch::tensor({p00 * 2.0, (1 - p00) * 3.0, (1 - p11) * 2.0, p11 * 3.0}, torch::kFloat64);
    CHECK((out.reshape({4}) - expect).abs().max().item<double>() < 1e-12);
    CHECK(weights.sizes() == torch::IntArrayRef({1, 1, 1, 2, 2}));
  }

  TEST_CASE("single token attention ignores the query and key projections") {
    torch::manual_seed(12);
    const int d = 6;
    auto p = random_projections(d);
    auto q = torch::randn({3, 4, d}, torch::kFloat64);
    auto kv = torch::randn({3, 4, d}, torch::kFloat64);
    auto base = cross_attention(q, kv, p.wq, p.wk, p.wv, p.wo, 2, 1);
    auto other = cross_attention(q, kv, torch::randn({d, d}, torch::kFloat64), torch::randn({d, d}, torch::kFloat64),
                                 p.wv, p.wo, 2, 1);
    CHECK(torch::equal(base, other));
    // With several tokens the query projection matters.
    auto multi = cross_attention(q, kv, p.wq, p.wk, p.wv, p.wo, 1, 2);
    auto multi_other = cross_attention(q, kv, torch::randn({d, d}, torch::kFloat64), p.wk, p.wv, p.wo, 1, 2);
    CHECK((multi - multi_other).abs().max().item<double>() > 1e-6);
  }

  TEST_CASE("f attention addend is spatially constant with one token") {
    auto cfg = small_encoder();
    cfg.token_split = 1;
    torch::manual_seed(13);
    Encoder enc(cfg, torch::zeros({8}));
    torch::NoGradGuard ng;
    auto& blk = enc.f_block();
    blk->w_o.normal_();
    auto t3 = torch::randn({2, 8, 8, 8});
    auto w = torch::randn({2, 8});
    // The block output itself is exactly constant over positions.
    auto raw = blk->forward(t3.flatten(2).transpose(1, 2), w.unsqueeze(1));
    CHECK(torch::equal(raw, raw.select(1, 0).unsqueeze(1).expand_as(raw)));
    CHECK(raw.abs().max().item<double>() > 0.0);
    auto addend = (enc.f_head_input(t3, w) - t3).flatten(2);
    CHECK((addend - addend.select(2, 0).unsqueeze(2)).abs().max().item<double>() <= 1e-6);

    blk->w_v.zero_();
    CHECK(torch::equal(enc.f_head_input(t3, w), t3));
  }

  TEST_CASE("zero output projection makes w+ rows equal w") {
    auto cfg = small_encoder();
    torch::manual_seed(14);
    Encoder enc(cfg, torch::zeros({8}));
    torch::NoGradGuard ng;
    auto w = torch::randn({3, 8});
    auto delta = torch::randn({3, cfg.num_styles, 8});
    auto wp = enc.wplus_attention(w, delta);
    CHECK(torch::equal(wp, w.unsqueeze(1).expand_as(wp)));
  }

  TEST_CASE("block rejects a token split that does not divide d") {
    CHECK_THROWS_AS(cross_attention(torch::zeros({1, 1, 6}), torch::zeros({1, 1, 6}), torch::eye(6), torch::eye(6),
                                    torch::eye(6), torch::eye(6), 1, 4),
                    ConfigError);
  }
}
