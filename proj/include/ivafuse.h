#ifndef IVAFUSE_H
#define IVAFUSE_H

/* C interface to the ivafuse library: speech feature extraction, IVA-based
 * feature fusion, CNN speaker classifiers, and the synthetic benchmarks used
 * to validate them.
 *
 * All functions return ivafuse_status; on failure, ivafuse_last_error()
 * describes what went wrong (thread-local). Pointer outputs may be NULL when
 * the caller does not need the value. Strings returned through char** are
 * heap-allocated and must be released with ivafuse_string_free().
 */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ivafuse_status {
  IVAFUSE_OK = 0,
  IVAFUSE_USAGE = 1,   /* bad arguments, config, or file contents */
  IVAFUSE_RUNTIME = 2, /* I/O or numerical failure during the run */
} ivafuse_status;

const char* ivafuse_version(void);

/* Message for the most recent failing call on this thread ("" if none). */
const char* ivafuse_last_error(void);

void ivafuse_string_free(char* s);

/* ---- configuration ----------------------------------------------------- */

/* Opaque bag of run settings (framing, feature, IVA, network, training and
 * seeding keys). Starts out with the documented defaults. */
typedef struct ivafuse_config ivafuse_config;

ivafuse_config* ivafuse_config_new(void);
void ivafuse_config_free(ivafuse_config* cfg);

/* Set one key, e.g. ("iva_eta0", "0.5"). Unknown keys or unparsable values
 * are usage errors. */
ivafuse_status ivafuse_config_set(ivafuse_config* cfg, const char* key, const char* value);

/* Apply a key=value file ('#' comments, blank lines allowed). */
ivafuse_status ivafuse_config_load_file(ivafuse_config* cfg, const char* path);

/* Full resolved config as key=value lines, one per key. */
ivafuse_status ivafuse_config_dump(const ivafuse_config* cfg, char** text);

/* Validate cross-key constraints without running anything. */
ivafuse_status ivafuse_config_validate(const ivafuse_config* cfg);

/* ---- dataset pipeline --------------------------------------------------- */

/* Read a manifest CSV (path,speaker_id[,split]), extract the fused feature
 * tensors for every sentence (LPC + MFCC, whitened) and the per-sentence IVA
 * outputs, and cache them under cache_dir (<id>.x.bin / .y.bin / .w.bin plus
 * index.csv). Fails if more than 1% of sentences fail. */
ivafuse_status ivafuse_extract(const ivafuse_config* cfg, const char* manifest_path,
                               const char* cache_dir, size_t* n_ok, size_t* n_failed);

/* Run IVA on one whitened tensor file (IVFT). Writes the separated tensor to
 * y_path (IVFT) and the demixing tensor to w_path (IVFW); either may be NULL.
 * trace_csv, when given, receives one iter,eta,cost row per iteration. */
ivafuse_status ivafuse_run_iva_file(const ivafuse_config* cfg, const char* x_path,
                                    const char* y_path, const char* w_path,
                                    const char* trace_csv, double* final_cost, int* iters);

/* Train the configured classifier on a prepared cache. Writes per-epoch
 * metrics CSV (epoch,step,loss,train_acc,eval_acc) to metrics_path and the
 * best checkpoint to checkpoint_path (either may be NULL). */
ivafuse_status ivafuse_train(const ivafuse_config* cfg, const char* cache_dir,
                             const char* metrics_path, const char* checkpoint_path,
                             double* best_eval_acc, double* final_train_acc,
                             double* final_loss);

/* Accuracy (percent) of a saved checkpoint on the cache's test split. */
ivafuse_status ivafuse_eval(const ivafuse_config* cfg, const char* cache_dir,
                            const char* checkpoint_path, double* test_acc);

/* ---- synthetic data ------------------------------------------------------ */

/* Generate n_speakers synthetic voices with n_train + n_test sentences each
 * (16 kHz PCM16 WAVs) under out_dir and write manifest.csv; *manifest_path
 * receives its location. */
ivafuse_status ivafuse_synth_speakers(const char* out_dir, int n_speakers, int n_train,
                                      int n_test, uint64_t seed, char** manifest_path);

/* Generate a seeded source/mixing/observation triple and write
 * mixture.s.bin, mixture.a.bin, mixture.x.bin under out_dir. */
ivafuse_status ivafuse_synth_mixture(int n, int k, int t, uint64_t seed,
                                     const char* out_dir);

/* ---- diagnostics --------------------------------------------------------- */

/* Compare the IVA analytic gradient and Hessian against central finite
 * differences on `instances` random problems; reports the worst relative
 * errors seen. */
ivafuse_status ivafuse_gradcheck_iva(int instances, uint64_t seed, double* max_grad_rel,
                                     double* max_hess_rel);

/* Finite-difference check of every network parameter on a small random
 * batch. Network size comes from cfg (variant, n1..n3, channels, D, F1, F2)
 * plus the explicit input dims. */
ivafuse_status ivafuse_gradcheck_nn(const ivafuse_config* cfg, int n, int t, int k,
                                    int n_classes, uint64_t seed, double* max_rel);

/* Separation benchmark: `trials` seeded mixtures with N cycling over
 * dims[0..n_dims), separated with the configured IVA settings. Writes one
 * seed,iters,final_cost,joint_isi row per trial to csv_path (optional) and
 * reports the median ISI and how many trials landed below `threshold`. */
ivafuse_status ivafuse_isi_bench(const ivafuse_config* cfg, const int* dims, size_t n_dims,
                                 int k, int t, int trials, uint64_t seed,
                                 const char* csv_path, double threshold,
                                 double* median_isi, int* n_below);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* IVAFUSE_H */
