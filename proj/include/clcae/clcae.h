#ifndef CLCAE_CLCAE_H
#define CLCAE_CLCAE_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CLCAE_API __declspec(dllexport)
#else
#define CLCAE_API __attribute__((visibility("default")))
#endif

typedef enum clcae_status {
  CLCAE_OK = 0,
  CLCAE_ERR_INVALID_ARGUMENT = 1,
  CLCAE_ERR_SHAPE = 2,
  CLCAE_ERR_RANGE = 3,
  CLCAE_ERR_CONFIG = 4,
  CLCAE_ERR_IO = 5,
  CLCAE_ERR_NOT_FOUND = 6,
  CLCAE_ERR_EMPTY_BATCH = 7,
  CLCAE_ERR_LABEL = 8,
  CLCAE_ERR_RANK = 9,
  CLCAE_ERR_TRAINING = 10,
  CLCAE_ERR_INTERNAL = 11
} clcae_status;

/* Message of the last failed call on this thread; empty after success. */
CLCAE_API const char* clcae_last_error(void);
CLCAE_API const char* clcae_status_name(clcae_status status);
/* Nonzero when the status stems from bad input rather than a fault. */
CLCAE_API int clcae_status_is_user_error(clcae_status status);
CLCAE_API const char* clcae_version(void);
CLCAE_API int clcae_checkpoint_format_version(void);

typedef void (*clcae_log_fn)(const char* line, void* user);

/* ---- Runs: configuration plus a run directory ------------------------- */

typedef struct clcae_run clcae_run;

/* config_path may be NULL (defaults, or <run_dir>/config.json when present).
   run_dir may be NULL (config value). seed may be NULL (config value). */
CLCAE_API clcae_status clcae_run_create(const char* config_path, const char* run_dir, const uint64_t* seed,
                                        clcae_run** out);
CLCAE_API void clcae_run_destroy(clcae_run* run);
CLCAE_API clcae_status clcae_run_set_logger(clcae_run* run, clcae_log_fn fn, void* user);
/* Effective configuration as JSON; free with clcae_string_free. */
CLCAE_API clcae_status clcae_run_config_json(const clcae_run* run, char** out_json);
CLCAE_API void clcae_string_free(char* s);

CLCAE_API clcae_status clcae_init_generator(clcae_run* run);
CLCAE_API clcae_status clcae_gen_pairs(clcae_run* run);
CLCAE_API clcae_status clcae_pretrain_align(clcae_run* run);
/* variant: "full", "no_align", "no_wplus_attention" or "no_f_attention". */
CLCAE_API clcae_status clcae_train_encoder(clcae_run* run, const char* variant);
/* method: "svm" or "pca". */
CLCAE_API clcae_status clcae_fit_directions(clcae_run* run, const char* method);
/* Writes <run_dir>/eval/report.{csv,json,md}. */
CLCAE_API clcae_status clcae_eval(clcae_run* run, int timing);
/* Writes <run_dir>/ablation/report.{csv,json,md}, training missing variants. */
CLCAE_API clcae_status clcae_ablate(clcae_run* run, int timing);

/* ---- Contexts: loaded checkpoints for inversion and editing ----------- */

typedef struct clcae_context clcae_context;
typedef struct clcae_inversion clcae_inversion;

CLCAE_API clcae_status clcae_context_open(const char* run_dir, clcae_context** out);
CLCAE_API void clcae_context_close(clcae_context* ctx);
/* Number of stored directions and the name at an index (owned by ctx). */
CLCAE_API int clcae_context_direction_count(const clcae_context* ctx);
CLCAE_API const char* clcae_context_direction_name(const clcae_context* ctx, int index);

CLCAE_API clcae_status clcae_invert_png(const clcae_context* ctx, const char* png_path, clcae_inversion** out);
CLCAE_API void clcae_inversion_free(clcae_inversion* inv);
/* psnr[0..2] = G(w), G(w+), G(w+, f) against the prepared input. */
CLCAE_API clcae_status clcae_inversion_psnr(const clcae_inversion* inv, double psnr[3]);
/* Writes w.f32, w_plus.f32, f.f32, inversion.json and rec_w.png,
   rec_wplus.png, rec_f.png into out_dir. */
CLCAE_API clcae_status clcae_inversion_write(const clcae_inversion* inv, const char* out_dir);

/* mode: "latent_only" or "latent_and_feature"; alpha in units of sigma. */
CLCAE_API clcae_status clcae_edit_png(const clcae_context* ctx, const clcae_inversion* inv, const char* direction,
                                      double alpha, const char* mode, const char* out_png);

/* Serves the JSON API until the process is stopped. static_dir may be NULL. */
CLCAE_API clcae_status clcae_serve(const clcae_context* ctx, const char* host, int port, int max_sessions,
                                   const char* static_dir);

#ifdef __cplusplus
}
#endif

#endif
