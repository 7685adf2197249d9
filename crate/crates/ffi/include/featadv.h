#ifndef FEATADV_H
#define FEATADV_H

/* Generated with cbindgen:0.27.0 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Domain of a feature batch passed to `featadv_perturb`.
 */
typedef enum FeatadvDomain {
  FEATADV_DOMAIN_SOURCE = 0,
  FEATADV_DOMAIN_TARGET = 1,
} FeatadvDomain;

/**
 * Result of every fallible call.
 */
typedef enum FeatadvStatus {
  FEATADV_STATUS_OK = 0,
  FEATADV_STATUS_NULL_POINTER = 1,
  FEATADV_STATUS_INVALID_UTF8 = 2,
  FEATADV_STATUS_INVALID_ARGUMENT = 3,
  FEATADV_STATUS_CONFIG = 4,
  FEATADV_STATUS_CONTRACT = 5,
  FEATADV_STATUS_SHAPE = 6,
  FEATADV_STATUS_NUMERIC = 7,
  FEATADV_STATUS_FORMAT = 8,
  FEATADV_STATUS_MISSING = 9,
  FEATADV_STATUS_IO = 10,
  FEATADV_STATUS_PANIC = 11,
} FeatadvStatus;

/**
 * A resolved run configuration.
 */
typedef struct FeatadvConfig FeatadvConfig;

/**
 * A trained state (networks, optimizers, logs) loaded from a checkpoint.
 */
typedef struct FeatadvModel FeatadvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *featadv_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call into the library.
 */
const char *featadv_last_error(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void featadv_string_free(char *s);

/**
 * Parses a TOML configuration (NULL or "" for the defaults).
 *
 * # Safety
 * `toml` must be NULL or a NUL-terminated string; `out` must be writable.
 */
enum FeatadvStatus featadv_config_new(const char *toml, struct FeatadvConfig **out);

/**
 * Applies one `key.path=value` override. The configuration is unchanged
 * when the override is rejected.
 *
 * # Safety
 * `cfg` must be a live handle and `assignment` a NUL-terminated string.
 */
enum FeatadvStatus featadv_config_set(struct FeatadvConfig *cfg, const char *assignment);

/**
 * Serializes the effective configuration; free the result with
 * `featadv_string_free`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum FeatadvStatus featadv_config_to_toml(const struct FeatadvConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle from `featadv_config_new` not yet freed.
 */
void featadv_config_free(struct FeatadvConfig *cfg);

/**
 * Runs a subcommand (`gen-data`, `pretrain`, `adapt`, `baseline`, `eval`,
 * `ablate`, `plot`) exactly as the command-line tool would. `resume` and
 * `until` (negative for none) apply to `pretrain` and `adapt` only.
 *
 * # Safety
 * `cfg` must be a live handle and `command` a NUL-terminated string.
 */
enum FeatadvStatus featadv_run(const struct FeatadvConfig *cfg,
                               const char *command,
                               bool resume,
                               int64_t until);

/**
 * Loads a checkpoint written by `pretrain`, `adapt` or `baseline`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FeatadvStatus featadv_model_load(const char *path, struct FeatadvModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from `featadv_model_load` not yet freed.
 */
void featadv_model_free(struct FeatadvModel *model);

/**
 * Number of classes the model predicts.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum FeatadvStatus featadv_model_classes(const struct FeatadvModel *model, size_t *out);

/**
 * Per-pixel argmax prediction for `n` RGB images of `h × w` in `[0, 1]`.
 * Writes `n·h·w` class indices to `labels`.
 *
 * # Safety
 * `images` must hold `n·3·h·w` doubles and `labels` room for `n·h·w` bytes.
 */
enum FeatadvStatus featadv_model_predict(const struct FeatadvModel *model,
                                         const double *images,
                                         size_t n,
                                         size_t h,
                                         size_t w,
                                         uint8_t *labels);

/**
 * Features of `n` images at the model's split point. `shape` receives the
 * four feature dimensions; `features` (which may be NULL to query the
 * shape only) receives their product in doubles.
 *
 * # Safety
 * `images` must hold `n·3·h·w` doubles, `shape` room for 4 sizes and
 * `features`, when not NULL, room for the full feature tensor.
 */
enum FeatadvStatus featadv_model_features(const struct FeatadvModel *model,
                                          const double *images,
                                          size_t n,
                                          size_t h,
                                          size_t w,
                                          size_t *shape,
                                          double *features);

/**
 * Adversarial copy of a feature batch under the configuration's
 * perturbation settings, with the model's classifier and discriminator as
 * the attacked networks. `labels` (`n·label_h·label_w` bytes) is required
 * for source features and must be NULL for target features.
 *
 * # Safety
 * `features` and `out` must hold the product of `shape[0..4]` doubles;
 * `labels`, when not NULL, must hold `shape[0]·label_h·label_w` bytes.
 */
enum FeatadvStatus featadv_perturb(const struct FeatadvModel *model,
                                   const struct FeatadvConfig *cfg,
                                   const double *features,
                                   const size_t *shape,
                                   enum FeatadvDomain domain,
                                   const uint8_t *labels,
                                   size_t label_h,
                                   size_t label_w,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEATADV_H */
