#ifndef W2D_H
#define W2D_H

/* Generated by cbindgen from the w2d-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every FFI function.
typedef enum w2d_status {
  W2D_OK = 0,
  W2D_ERR_NULL_ARGUMENT = 1,
  W2D_ERR_INVALID_ARGUMENT = 2,
  W2D_ERR_UTF8 = 3,
  W2D_ERR_IO = 4,
  W2D_ERR_RUNTIME = 5,
  W2D_ERR_PANIC = 6,
} w2d_status;

// Training algorithm selector for `w2d_train`.
typedef enum w2d_algorithm {
  W2D_ALG_ERM = 0,
  W2D_ALG_FEATURE_ONLY = 1,
  W2D_ALG_SAMPLE_ONLY = 2,
  W2D_ALG_W2D = 3,
  W2D_ALG_W2D_STAR = 4,
} w2d_algorithm;

// Opaque dataset handle.
typedef struct w2d_dataset w2d_dataset;

// Opaque model handle.
typedef struct w2d_model w2d_model;

// Training hyperparameters (mirrors the library configuration).
typedef struct w2d_train_config {
  // Feature drop fraction in [0, 1].
  double phi;
  // Fraction of selected samples that receive masking, in [0, 1].
  double beta;
  // Worst-case sample fraction in (0, 1].
  double rho;
  // Whole-batch patching fraction of epochs, in [0, 1].
  double kappa;
  // Batch size.
  size_t eta;
  size_t epochs;
  double learning_rate;
  uint64_t seed;
  // Nonzero enables stochastic weight averaging.
  int swa_enabled;
  double swa_start_fraction;
  // Plain-training epochs for the frozen ranker of the two-stage variant.
  size_t w2dstar_bias_epochs;
} w2d_train_config;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length in bytes.
size_t w2d_last_error(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *w2d_version(void);

// A configuration filled with the library defaults.
struct w2d_train_config w2d_train_config_default(void);

// Generates the colored-digit environments (+90/+80/-90 by default) from a
// deterministic digit corpus of `n_source` images.
enum w2d_status w2d_dataset_cmnist(size_t n_source,
                                   uint64_t seed,
                                   double label_noise,
                                   struct w2d_dataset **out);

// Generates the synthetic two-shift benchmark (train and test environments).
enum w2d_status w2d_dataset_two_shift(uint64_t seed,
                                      double diversity_strength,
                                      double correlation_strength,
                                      size_t n_per_env,
                                      struct w2d_dataset **out);

// Loads a dataset bundle directory written by `w2d_dataset_save`.
enum w2d_status w2d_dataset_load(const char *dir, struct w2d_dataset **out);

// Saves a dataset bundle as a directory (text manifest plus binaries).
enum w2d_status w2d_dataset_save(const struct w2d_dataset *dataset, const char *dir);

// Number of environments in the bundle.
enum w2d_status w2d_dataset_env_count(const struct w2d_dataset *dataset, size_t *out);

// Copies the name of environment `index` into `buf` (NUL-terminated,
// truncated to `cap`); writes the full length to `len` when non-null.
enum w2d_status w2d_dataset_env_name(const struct w2d_dataset *dataset,
                                     size_t index,
                                     char *buf,
                                     size_t cap,
                                     size_t *len);

// Trains a fresh fully connected model (one hidden layer of `hidden` units)
// on the union of the bundle's training environments. With a null
// `test_env` the last test-role environment of the bundle is used for the
// run protocol; `out_test_accuracy` (optional) receives the protocol's
// test-domain-validated accuracy in percent.
enum w2d_status w2d_train(const struct w2d_dataset *dataset,
                          enum w2d_algorithm algorithm,
                          const struct w2d_train_config *config,
                          size_t hidden,
                          const char *test_env,
                          struct w2d_model **out_model,
                          double *out_test_accuracy);

// One training step of the integrated objective on a caller-shaped batch is
// intentionally not exposed; training goes through `w2d_train`. This
// function instead exposes the plain training loop on a single environment
// for callers that manage their own evaluation protocol.
enum w2d_status w2d_train_on_env(const struct w2d_dataset *dataset,
                                 const char *env_name,
                                 enum w2d_algorithm algorithm,
                                 const struct w2d_train_config *config,
                                 size_t hidden,
                                 struct w2d_model **out_model);

// Argmax accuracy (percent) of the model on one environment.
enum w2d_status w2d_evaluate(const struct w2d_model *model,
                             const struct w2d_dataset *dataset,
                             const char *env_name,
                             double *out_accuracy);

// Saves a model checkpoint (binary plus `.manifest` text).
enum w2d_status w2d_model_save(const struct w2d_model *model, const char *path);

// Loads a model checkpoint written by `w2d_model_save`.
enum w2d_status w2d_model_load(const char *path, struct w2d_model **out);

// Total parameter count of the model.
enum w2d_status w2d_model_param_count(const struct w2d_model *model, size_t *out);

// Ranking scores of `n_algorithms` rows against an ERM baseline row, all
// over the same `n_datasets` in the same order. `means` is row-major
// `[n_algorithms][n_datasets]`; `scores` receives one integer per row.
enum w2d_status w2d_ranking_scores(const double *means,
                                   size_t n_algorithms,
                                   size_t n_datasets,
                                   const double *erm_means,
                                   const double *erm_stderrs,
                                   int *scores);

// Releases a dataset handle (null is a no-op).
void w2d_dataset_free(struct w2d_dataset *dataset);

// Releases a model handle (null is a no-op).
void w2d_model_free(struct w2d_model *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* W2D_H */
