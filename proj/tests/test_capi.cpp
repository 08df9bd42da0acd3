#include "doctest_torch.hpp"

#include <clcae/clcae.h>

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "image_io.hpp"
#include "test_support.hpp"

using namespace clcae;

namespace {

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("capi") {
  TEST_CASE("status helpers") {
    CHECK(std::string(clcae_status_name(CLCAE_ERR_NOT_FOUND)) == "not_found");
    CHECK(clcae_status_is_user_error(CLCAE_ERR_CONFIG));
    CHECK(!clcae_status_is_user_error(CLCAE_ERR_INTERNAL));
    CHECK(!clcae_status_is_user_error(CLCAE_OK));
    CHECK(clcae_checkpoint_format_version() >= 1);
    CHECK(std::string(clcae_version()).size() > 0);
  }

  TEST_CASE("argument and lookup errors") {
    CHECK(clcae_run_create(nullptr, nullptr, nullptr, nullptr) == CLCAE_ERR_INVALID_ARGUMENT);
    CHECK(std::string(clcae_last_error()).find("null") != std::string::npos);
    clcae_context* ctx = nullptr;
    CHECK(clcae_context_open("/nonexistent/run", &ctx) == CLCAE_ERR_NOT_FOUND);
    CHECK(ctx == nullptr);

    testing_support::TempDir dir("capi_cfg");
    std::ofstream(dir.path() / "bad.json") << R"({"training": {"steps": -1}})";
    clcae_run* run = nullptr;
    CHECK(clcae_run_create((dir.path() / "bad.json").c_str(), nullptr, nullptr, &run) == CLCAE_ERR_CONFIG);
    CHECK(run == nullptr);
    CHECK(std::string(clcae_last_error()).find("steps") != std::string::npos);
  }

  TEST_CASE("run handle exposes the resolved config") {
    clcae_run* run = nullptr;
    const std::uint64_t seed = 9;
    REQUIRE(clcae_run_create(nullptr, "somewhere", &seed, &run) == CLCAE_OK);
    char* text = nullptr;
    REQUIRE(clcae_run_config_json(run, &text) == CLCAE_OK);
    auto j = Json::parse(text);
    CHECK(j.at("seed") == 9);
    CHECK(j.at("run_dir") == "somewhere");
    clcae_string_free(text);
    CHECK(clcae_train_encoder(run, "bogus") == CLCAE_ERR_INVALID_ARGUMENT);
    CHECK(clcae_fit_directions(run, "ica") == CLCAE_ERR_CONFIG);
    clcae_run_destroy(run);
  }

  TEST_CASE("invert and edit through the handles") {
    testing_support::TempDir dir("capi_run");
    testing_support::make_tiny_run(dir.path() / "run");
    clcae_context* ctx = nullptr;
    REQUIRE(clcae_context_open((dir.path() / "run").c_str(), &ctx) == CLCAE_OK);
    CHECK(clcae_context_direction_count(ctx) == 2);
    CHECK(std::string(clcae_context_direction_name(ctx, 1)) == "pc0");
    CHECK(clcae_context_direction_name(ctx, 2) == nullptr);

    Generator gen(testing_support::tiny_generator());
    write_png(dir.path() / "in.png", ImageTensor{sample_pairs(gen, 1, 4).images[0]});
    clcae_inversion* inv = nullptr;
    REQUIRE(clcae_invert_png(ctx, (dir.path() / "in.png").c_str(), &inv) == CLCAE_OK);
    double psnr[3] = {0, 0, 0};
    CHECK(clcae_inversion_psnr(inv, psnr) == CLCAE_OK);
    CHECK(psnr[2] > 0.0);
    const auto out = dir.path() / "out";
    REQUIRE(clcae_inversion_write(inv, out.c_str()) == CLCAE_OK);
    for (const char* f : {"w.f32", "w_plus.f32", "f.f32", "inversion.json", "rec_w.png", "rec_wplus.png", "rec_f.png"}) {
      CHECK(std::filesystem::exists(out / f));
    }
    CHECK(std::filesystem::file_size(out / "w_plus.f32") == 6 * 8 * 4);
    const auto edited = dir.path() / "edit.png";
    REQUIRE(clcae_edit_png(ctx, inv, "attr0", 0.0, "latent_and_feature", edited.c_str()) == CLCAE_OK);
    CHECK(slurp(edited) == slurp(out / "rec_f.png"));
    CHECK(clcae_edit_png(ctx, inv, "nope", 1.0, "latent_only", edited.c_str()) == CLCAE_ERR_NOT_FOUND);
    CHECK(clcae_edit_png(ctx, inv, "attr0", 1.0, "both", edited.c_str()) == CLCAE_ERR_CONFIG);
    clcae_inversion* none = nullptr;
    CHECK(clcae_invert_png(ctx, (dir.path() / "missing.png").c_str(), &none) == CLCAE_ERR_IO);
    CHECK(none == nullptr);
    clcae_inversion_free(inv);
    clcae_context_close(ctx);
  }
}
