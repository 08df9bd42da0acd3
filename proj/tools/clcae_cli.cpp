#include <clcae/clcae.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

int report(clcae_status status, const char* what) {
  if (status == CLCAE_OK) return kExitOk;
  std::fprintf(stderr, "clcae: %s failed [%s]: %s\n", what, clcae_status_name(status), clcae_last_error());
  return clcae_status_is_user_error(status) ? kExitUser : kExitInternal;
}

void print_line(const char* line, void*) { std::fprintf(stderr, "%s\n", line); }

struct RunHandle {
  clcae_run* run = nullptr;
  ~RunHandle() { clcae_run_destroy(run); }
};

struct ContextHandle {
  clcae_context* ctx = nullptr;
  ~ContextHandle() { clcae_context_close(ctx); }
};

struct InversionHandle {
  clcae_inversion* inv = nullptr;
  ~InversionHandle() { clcae_inversion_free(inv); }
};

std::string alpha_tag(double alpha) {
  std::ostringstream s;
  s << alpha;
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CLCAE: contrastive latent inversion and editing for a toy style generator", "clcae"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir = "run";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override every section seed");
  app.add_option("--out", run_dir, "Run directory")->capture_default_str();

  auto* init_cmd = app.add_subcommand("init-generator", "Create and save a seeded generator");
  auto* pairs_cmd = app.add_subcommand("gen-pairs", "Sample (image, w) training pairs");
  auto* align_cmd = app.add_subcommand("pretrain-align", "Pretrain the contrastive alignment model");

  auto* train_cmd = app.add_subcommand("train-encoder", "Train the inversion encoder");
  std::string variant = "full";
  train_cmd->add_option("--variant", variant, "Encoder variant")
      ->check(CLI::IsMember({"full", "no_align", "no_wplus_attention", "no_f_attention"}))
      ->capture_default_str();

  auto* fit_cmd = app.add_subcommand("fit-directions", "Fit editing directions in W");
  std::string method;
  fit_cmd->add_option("method", method, "svm or pca")->required()->check(CLI::IsMember({"svm", "pca"}));

  auto* invert_cmd = app.add_subcommand("invert", "Invert a PNG image");
  std::string image;
  std::string output;
  invert_cmd->add_option("image", image, "PNG image")->required()->check(CLI::ExistingFile);
  invert_cmd->add_option("-o,--output", output, "Output directory (default <run>/inversions/<stem>)");

  auto* edit_cmd = app.add_subcommand("edit", "Invert a PNG image and apply one edit");
  std::string direction;
  double alpha = 0.0;
  std::string mode = "latent_and_feature";
  edit_cmd->add_option("image", image, "PNG image")->required()->check(CLI::ExistingFile);
  edit_cmd->add_option("--direction", direction, "Direction name")->required();
  edit_cmd->add_option("--alpha", alpha, "Edit strength in sigma units")->required();
  edit_cmd->add_option("--mode", mode, "Edit mode")
      ->check(CLI::IsMember({"latent_only", "latent_and_feature"}))
      ->capture_default_str();
  edit_cmd->add_option("-o,--output", output, "Output PNG (default <run>/edits/...)");

  bool no_timing = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate the trained encoder on held-out samples");
  eval_cmd->add_flag("--no-timing", no_timing, "Skip the runtime column");
  auto* ablate_cmd = app.add_subcommand("ablate", "Train missing ablation variants and report the ladder");
  ablate_cmd->add_flag("--no-timing", no_timing, "Skip the runtime column");

  auto* serve_cmd = app.add_subcommand("serve", "Serve the JSON editing API");
  std::string host = "127.0.0.1";
  int port = 8080;
  int max_sessions = 256;
  std::string static_dir;
  serve_cmd->add_option("--host", host)->capture_default_str();
  serve_cmd->add_option("--port", port)->check(CLI::Range(1, 65535))->capture_default_str();
  serve_cmd->add_option("--max-sessions", max_sessions)->check(CLI::PositiveNumber)->capture_default_str();
  serve_cmd->add_option("--static", static_dir, "Directory of UI assets to serve at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    std::cerr << app.help();
    return kExitUser;
  }

  const auto needs_context = invert_cmd->parsed() || edit_cmd->parsed() || serve_cmd->parsed();
  if (needs_context) {
    ContextHandle ctx;
    if (auto rc = report(clcae_context_open(run_dir.c_str(), &ctx.ctx), "open run"); rc) return rc;
    if (serve_cmd->parsed()) {
      std::fprintf(stderr, "serving %s on http://%s:%d\n", run_dir.c_str(), host.c_str(), port);
      return report(clcae_serve(ctx.ctx, host.c_str(), port, max_sessions,
                                static_dir.empty() ? nullptr : static_dir.c_str()),
                    "serve");
    }
    InversionHandle inv;
    if (auto rc = report(clcae_invert_png(ctx.ctx, image.c_str(), &inv.inv), "invert"); rc) return rc;
    const auto stem = std::filesystem::path(image).stem().string();
    if (invert_cmd->parsed()) {
      const auto dir = output.empty() ? (std::filesystem::path(run_dir) / "inversions" / stem).string() : output;
      if (auto rc = report(clcae_inversion_write(inv.inv, dir.c_str()), "write inversion"); rc) return rc;
      double psnr[3];
      clcae_inversion_psnr(inv.inv, psnr);
      std::printf("%s\npsnr w %.3f wplus %.3f f %.3f\n", dir.c_str(), psnr[0], psnr[1], psnr[2]);
      return kExitOk;
    }
    auto path = std::filesystem::path(output);
    if (output.empty()) {
      path = std::filesystem::path(run_dir) / "edits" /
             (stem + "_" + direction + "_" + alpha_tag(alpha) + "_" + mode + ".png");
      std::filesystem::create_directories(path.parent_path());
    }
    if (auto rc = report(clcae_edit_png(ctx.ctx, inv.inv, direction.c_str(), alpha, mode.c_str(), path.c_str()),
                         "edit");
        rc) {
      return rc;
    }
    std::printf("%s\n", path.c_str());
    return kExitOk;
  }

  RunHandle run;
  const std::uint64_t seed_value = seed.value_or(0);
  if (auto rc = report(clcae_run_create(config_path.empty() ? nullptr : config_path.c_str(), run_dir.c_str(),
                                        seed ? &seed_value : nullptr, &run.run),
                       "load config");
      rc) {
    return rc;
  }
  clcae_run_set_logger(run.run, print_line, nullptr);

  if (init_cmd->parsed()) return report(clcae_init_generator(run.run), "init-generator");
  if (pairs_cmd->parsed()) return report(clcae_gen_pairs(run.run), "gen-pairs");
  if (align_cmd->parsed()) return report(clcae_pretrain_align(run.run), "pretrain-align");
  if (train_cmd->parsed()) return report(clcae_train_encoder(run.run, variant.c_str()), "train-encoder");
  if (fit_cmd->parsed()) return report(clcae_fit_directions(run.run, method.c_str()), "fit-directions");
  if (eval_cmd->parsed()) return report(clcae_eval(run.run, no_timing ? 0 : 1), "eval");
  if (ablate_cmd->parsed()) return report(clcae_ablate(run.run, no_timing ? 0 : 1), "ablate");
  return kExitInternal;
}
