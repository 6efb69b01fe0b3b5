/* Generated by cbindgen; do not edit. */

#ifndef CFGAD_H
#define CFGAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfgadStatus {
  CFGAD_STATUS_OK = 0,
  CFGAD_STATUS_NULL_POINTER = 1,
  CFGAD_STATUS_INVALID_ARGUMENT = 2,
  CFGAD_STATUS_IO = 3,
  CFGAD_STATUS_PARSE = 4,
  CFGAD_STATUS_CONFIG = 5,
  CFGAD_STATUS_UNDEFINED_METRIC = 6,
  CFGAD_STATUS_TRAINING = 7,
  CFGAD_STATUS_CHECKPOINT = 8,
  CFGAD_STATUS_PANIC = 9,
} CfgadStatus;

// Loaded or generated graph.
typedef struct CfgadGraph CfgadGraph;

// Result and model of one training run.
typedef struct CfgadRun CfgadRun;

typedef struct CfgadMetrics {
  double macro_f1;
  double auc_roc;
  double auc_pr;
} CfgadMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until
// the next call into the library on this thread.
const char *cfgad_last_error(void);

// Library version as a static nul-terminated string.
const char *cfgad_version(void);

void cfgad_string_free(char *s);

// Loads a graph from an edge list, a feature CSV and a label file.
enum CfgadStatus cfgad_graph_load(const char *edges,
                                  const char *features,
                                  const char *labels,
                                  struct CfgadGraph **graph);

// Generates a synthetic graph from a TOML synthetic spec.
enum CfgadStatus cfgad_graph_synthetic(const char *spec_toml, struct CfgadGraph **graph);

// Assigns train/val/test splits (val:test = 1:2).
enum CfgadStatus cfgad_graph_make_splits(struct CfgadGraph *graph,
                                         double train_frac,
                                         uint64_t seed);

size_t cfgad_graph_num_nodes(const struct CfgadGraph *graph);

size_t cfgad_graph_num_edges(const struct CfgadGraph *graph);

void cfgad_graph_free(struct CfgadGraph *graph);

// Trains the pipeline on a split graph. `config_toml` holds pipeline keys
// (as in a `[pipeline]` section) or is null for the defaults.
enum CfgadStatus cfgad_train(const struct CfgadGraph *graph,
                             const char *config_toml,
                             struct CfgadRun **run);

// Test-split metrics recorded at training time.
enum CfgadStatus cfgad_run_test_metrics(const struct CfgadRun *run, struct CfgadMetrics *metrics);

// The run result as JSON; free with `cfgad_string_free`.
enum CfgadStatus cfgad_run_result_json(const struct CfgadRun *run, char **json);

// Recomputes anomaly probabilities for every node of `graph` into `probs`,
// which must hold `len == cfgad_graph_num_nodes(graph)` values.
enum CfgadStatus cfgad_run_probabilities(const struct CfgadRun *run,
                                         const struct CfgadGraph *graph,
                                         double *probs,
                                         size_t len);

// Evaluates a trained run on the test split of `graph`.
enum CfgadStatus cfgad_run_evaluate(const struct CfgadRun *run,
                                    const struct CfgadGraph *graph,
                                    struct CfgadMetrics *metrics);

enum CfgadStatus cfgad_run_save(const struct CfgadRun *run, const char *path);

// Loads a checkpoint. The loaded run carries no training history, so
// `cfgad_run_test_metrics` fails on it; use `cfgad_run_evaluate`.
enum CfgadStatus cfgad_run_load(const char *path, struct CfgadRun **run);

void cfgad_run_free(struct CfgadRun *run);

enum CfgadStatus cfgad_macro_f1(const uint8_t *pred,
                                const uint8_t *truth,
                                size_t len,
                                double *value);

enum CfgadStatus cfgad_auc_roc(const double *scores,
                               const uint8_t *truth,
                               size_t len,
                               double *value);

enum CfgadStatus cfgad_auc_pr(const double *scores,
                              const uint8_t *truth,
                              size_t len,
                              double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFGAD_H */
