#include "clcae/clcae.h"

#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "image_io.hpp"
#include "json_util.hpp"
#include "run.hpp"
#include "service.hpp"

struct clcae_run {
  clcae::RunConfig config;
  clcae_log_fn log_fn = nullptr;
  void* log_user = nullptr;

  clcae::ProgressFn logger() const {
    if (!log_fn) return {};
    return [fn = log_fn, user = log_user](const std::string& line) { fn(line.c_str(), user); };
  }
};

struct clcae_context {
  std::shared_ptr<clcae::Workspace> workspace;
  std::vector<std::string> direction_names;
};

struct clcae_inversion {
  clcae::InversionBundle bundle;
};

namespace {

thread_local std::string g_last_error;

clcae_status fail(clcae_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename F>
clcae_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return CLCAE_OK;
  } catch (const clcae::ShapeError& e) {
    return fail(CLCAE_ERR_SHAPE, e.what());
  } catch (const clcae::RangeError& e) {
    return fail(CLCAE_ERR_RANGE, e.what());
  } catch (const clcae::ConfigError& e) {
    return fail(CLCAE_ERR_CONFIG, e.what());
  } catch (const clcae::IoError& e) {
    return fail(CLCAE_ERR_IO, e.what());
  } catch (const clcae::NotFoundError& e) {
    return fail(CLCAE_ERR_NOT_FOUND, e.what());
  } catch (const clcae::EmptyBatchError& e) {
    return fail(CLCAE_ERR_EMPTY_BATCH, e.what());
  } catch (const clcae::LabelError& e) {
    return fail(CLCAE_ERR_LABEL, e.what());
  } catch (const clcae::RankError& e) {
    return fail(CLCAE_ERR_RANK, e.what());
  } catch (const clcae::TrainingError& e) {
    return fail(CLCAE_ERR_TRAINING, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(CLCAE_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(CLCAE_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(CLCAE_ERR_INTERNAL, "unknown error");
  }
}

#define CLCAE_REQUIRE(cond, what) \
  if (!(cond)) return fail(CLCAE_ERR_INVALID_ARGUMENT, what)

}  // namespace

extern "C" {

const char* clcae_last_error(void) { return g_last_error.c_str(); }

const char* clcae_status_name(clcae_status status) {
  switch (status) {
    case CLCAE_OK:
      return "ok";
    case CLCAE_ERR_INVALID_ARGUMENT:
      return "invalid_argument";
    case CLCAE_ERR_SHAPE:
      return "shape";
    case CLCAE_ERR_RANGE:
      return "range";
    case CLCAE_ERR_CONFIG:
      return "config";
    case CLCAE_ERR_IO:
      return "io";
    case CLCAE_ERR_NOT_FOUND:
      return "not_found";
    case CLCAE_ERR_EMPTY_BATCH:
      return "empty_batch";
    case CLCAE_ERR_LABEL:
      return "label";
    case CLCAE_ERR_RANK:
      return "rank";
    case CLCAE_ERR_TRAINING:
      return "training";
    case CLCAE_ERR_INTERNAL:
      return "internal";
  }
  return "unknown";
}

int clcae_status_is_user_error(clcae_status status) {
  return status != CLCAE_OK && status != CLCAE_ERR_INTERNAL && status != CLCAE_ERR_TRAINING;
}

const char* clcae_version(void) { return "0.1.0"; }

int clcae_checkpoint_format_version(void) { return clcae::kCheckpointFormatVersion; }

clcae_status clcae_run_create(const char* config_path, const char* run_dir, const uint64_t* seed, clcae_run** out) {
  CLCAE_REQUIRE(out, "out must not be null");
  *out = nullptr;
  return guarded([&] {
    clcae::RunConfig cfg;
    if (config_path) {
      cfg = clcae::RunConfig::load(config_path);
    } else if (run_dir && std::filesystem::exists(std::filesystem::path(run_dir) / "config.json")) {
      cfg = clcae::RunConfig::load(std::filesystem::path(run_dir) / "config.json");
    }
    if (run_dir) cfg.run_dir = run_dir;
    if (seed) cfg.set_seed(*seed);
    auto run = std::make_unique<clcae_run>();
    run->config = std::move(cfg);
    *out = run.release();
  });
}

void clcae_run_destroy(clcae_run* run) { delete run; }

clcae_status clcae_run_set_logger(clcae_run* run, clcae_log_fn fn, void* user) {
  CLCAE_REQUIRE(run, "run must not be null");
  run->log_fn = fn;
  run->log_user = user;
  g_last_error.clear();
  return CLCAE_OK;
}

clcae_status clcae_run_config_json(const clcae_run* run, char** out_json) {
  CLCAE_REQUIRE(run && out_json, "run and out_json must not be null");
  return guarded([&] {
    const auto text = run->config.to_json().dump(2);
    auto* buf = new char[text.size() + 1];
    std::memcpy(buf, text.c_str(), text.size() + 1);
    *out_json = buf;
  });
}

void clcae_string_free(char* s) { delete[] s; }

clcae_status clcae_init_generator(clcae_run* run) {
  CLCAE_REQUIRE(run, "run must not be null");
  return guarded([&] { clcae::stage::init_generator(run->config, run->logger()); });
}

clcae_status clcae_gen_pairs(clcae_run* run) {
  CLCAE_REQUIRE(run, "run must not be null");
  return guarded([&] { clcae::stage::gen_pairs(run->config, run->logger()); });
}

clcae_status clcae_pretrain_align(clcae_run* run) {
  CLCAE_REQUIRE(run, "run must not be null");
  return guarded([&] { clcae::stage::pretrain_align(run->config, run->logger()); });
}

clcae_status clcae_train_encoder(clcae_run* run, const char* variant) {
  CLCAE_REQUIRE(run, "run must not be null");
  using clcae::stage::EncoderVariant;
  const std::string v = variant ? variant : "full";
  EncoderVariant ev;
  if (v == "full") ev = EncoderVariant::Full;
  else if (v == "no_align") ev = EncoderVariant::NoAlign;
  else if (v == "no_wplus_attention") ev = EncoderVariant::NoWPlusAttention;
  else if (v == "no_f_attention") ev = EncoderVariant::NoFAttention;
  else return fail(CLCAE_ERR_INVALID_ARGUMENT, "unknown encoder variant '" + v + "'");
  return guarded([&] { clcae::stage::train_encoder(run->config, ev, run->logger()); });
}

clcae_status clcae_fit_directions(clcae_run* run, const char* method) {
  CLCAE_REQUIRE(run && method, "run and method must not be null");
  return guarded([&] {
    clcae::stage::fit_directions(run->config, clcae::direction_method_from_string(method), run->logger());
  });
}

clcae_status clcae_eval(clcae_run* run, int timing) {
  CLCAE_REQUIRE(run, "run must not be null");
  return guarded([&] { clcae::stage::evaluate(run->config, timing != 0, run->logger()); });
}

clcae_status clcae_ablate(clcae_run* run, int timing) {
  CLCAE_REQUIRE(run, "run must not be null");
  return guarded([&] { clcae::stage::ablate(run->config, timing != 0, run->logger()); });
}

clcae_status clcae_context_open(const char* run_dir, clcae_context** out) {
  CLCAE_REQUIRE(run_dir && out, "run_dir and out must not be null");
  *out = nullptr;
  return guarded([&] {
    auto ctx = std::make_unique<clcae_context>();
    ctx->workspace = clcae::Workspace::open(run_dir);
    for (const auto& d : ctx->workspace->directions().all()) ctx->direction_names.push_back(d.name);
    *out = ctx.release();
  });
}

void clcae_context_close(clcae_context* ctx) { delete ctx; }

int clcae_context_direction_count(const clcae_context* ctx) {
  return ctx ? static_cast<int>(ctx->direction_names.size()) : 0;
}

const char* clcae_context_direction_name(const clcae_context* ctx, int index) {
  if (!ctx || index < 0 || index >= static_cast<int>(ctx->direction_names.size())) return nullptr;
  return ctx->direction_names[static_cast<std::size_t>(index)].c_str();
}

clcae_status clcae_invert_png(const clcae_context* ctx, const char* png_path, clcae_inversion** out) {
  CLCAE_REQUIRE(ctx && png_path && out, "ctx, png_path and out must not be null");
  *out = nullptr;
  return guarded([&] {
    auto inv = std::make_unique<clcae_inversion>();
    inv->bundle = ctx->workspace->invert(clcae::read_png(png_path));
    *out = inv.release();
  });
}

void clcae_inversion_free(clcae_inversion* inv) { delete inv; }

clcae_status clcae_inversion_psnr(const clcae_inversion* inv, double psnr[3]) {
  CLCAE_REQUIRE(inv && psnr, "inv and psnr must not be null");
  psnr[0] = inv->bundle.psnr_w;
  psnr[1] = inv->bundle.psnr_wplus;
  psnr[2] = inv->bundle.psnr_f;
  g_last_error.clear();
  return CLCAE_OK;
}

clcae_status clcae_inversion_write(const clcae_inversion* inv, const char* out_dir) {
  CLCAE_REQUIRE(inv && out_dir, "inv and out_dir must not be null");
  return guarded([&] {
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    const auto& b = inv->bundle;
    clcae::write_f32_blob(dir / "w.f32", b.result.w.values);
    clcae::write_f32_blob(dir / "w_plus.f32", b.result.w_plus.rows);
    clcae::write_f32_blob(dir / "f.f32", b.result.f.values);
    clcae::write_png(dir / "rec_w.png", b.rec_w);
    clcae::write_png(dir / "rec_wplus.png", b.rec_wplus);
    clcae::write_png(dir / "rec_f.png", b.rec_f);
    clcae::Json meta = {{"w", {{"file", "w.f32"}, {"shape", b.result.w.values.sizes().vec()}}},
                        {"w_plus", {{"file", "w_plus.f32"}, {"shape", b.result.w_plus.rows.sizes().vec()}}},
                        {"f",
                         {{"file", "f.f32"},
                          {"shape", b.result.f.values.sizes().vec()},
                          {"layer", b.result.f.layer_index}}},
                        {"psnr", {{"w", b.psnr_w}, {"wplus", b.psnr_wplus}, {"f", b.psnr_f}}}};
    std::ofstream out(dir / "inversion.json", std::ios::trunc);
    if (!out) throw clcae::IoError("cannot write " + (dir / "inversion.json").string());
    out << meta.dump(2) << '\n';
  });
}

clcae_status clcae_edit_png(const clcae_context* ctx, const clcae_inversion* inv, const char* direction,
                            double alpha, const char* mode, const char* out_png) {
  CLCAE_REQUIRE(ctx && inv && direction && mode && out_png, "arguments must not be null");
  return guarded([&] {
    const auto image =
        ctx->workspace->edit(inv->bundle.result, {direction, alpha, clcae::edit_mode_from_string(mode)});
    clcae::write_png(out_png, image);
  });
}

clcae_status clcae_serve(const clcae_context* ctx, const char* host, int port, int max_sessions,
                         const char* static_dir) {
  CLCAE_REQUIRE(ctx && host, "ctx and host must not be null");
  CLCAE_REQUIRE(port > 0 && port < 65536, "port must lie in [1, 65535]");
  CLCAE_REQUIRE(max_sessions > 0, "max_sessions must be positive");
  return guarded([&] {
    if (!clcae::serve_http(ctx->workspace, host, port, static_cast<std::size_t>(max_sessions),
                           static_dir ? static_dir : "")) {
      throw clcae::IoError("cannot listen on " + std::string(host) + ":" + std::to_string(port));
    }
  });
}

}  // extern "C"
