#ifndef M3_M3_H
#define M3_M3_H

#include <stddef.h>
#include <stdint.h>

#if defined(M3_BUILDING_LIBRARY)
#define M3_API __attribute__((visibility("default")))
#else
#define M3_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every fallible call returns a status. On failure a one-line message is
   available from m3_last_error() until the next failing call on the same
   thread. */
typedef enum m3_status {
  M3_OK = 0,
  M3_ERR_INVALID_ARGUMENT = 1,
  M3_ERR_SHAPE_MISMATCH = 2,
  M3_ERR_NON_FINITE = 3,
  M3_ERR_IO = 4,
  M3_ERR_FORMAT = 5,
  M3_ERR_VOCABULARY_MISMATCH = 6,
  M3_ERR_DIVERGED = 7,
  M3_ERR_INTERNAL = 8
} m3_status;

typedef struct m3_dataset m3_dataset;
typedef struct m3_model m3_model;

M3_API const char* m3_version(void);
M3_API const char* m3_last_error(void);
M3_API const char* m3_status_name(m3_status status);

/* Strings returned through char** out-parameters are owned by the caller. */
M3_API void m3_string_free(char* s);

/* ---- datasets ---------------------------------------------------------- */

M3_API m3_status m3_dataset_read(const char* path, m3_dataset** out);
M3_API m3_status m3_dataset_write(const m3_dataset* dataset, const char* path);
M3_API void m3_dataset_free(m3_dataset* dataset);
M3_API size_t m3_dataset_size(const m3_dataset* dataset);
M3_API m3_status m3_dataset_meta_json(const m3_dataset* dataset, char** out);

/* kind: "markov", "long-copy" or "mixed-context". params_json may be NULL
   or an object of generator parameters; unknown keys are rejected. */
M3_API m3_status m3_synthetic_generate(const char* kind, const char* params_json, uint64_t seed,
                                       m3_dataset** out);

/* Fills in defaults for partial generator parameters. */
M3_API m3_status m3_synthetic_config_resolve(const char* params_json, char** out);

/* Reads `userId,movieId,rating,timestamp`, drops rare items and writes the
   vocabulary file. The result holds one full sequence per user. */
M3_API m3_status m3_movielens_load(const char* ratings_path, size_t min_item_count,
                                   const char* vocabulary_path, m3_dataset** out);

/* Resolved dataset configuration for a named preset ("ml20m", "ml20m-s",
   ...) or the defaults when name is NULL. */
M3_API m3_status m3_dataset_config_json(const char* preset, char** out);
M3_API m3_status m3_dataset_config_resolve(const char* config_json, char** out);

/* Length filter, sliding windows and a seeded per-user split. */
M3_API m3_status m3_dataset_prepare(const m3_dataset* sequences, const char* dataset_config_json,
                                    uint64_t seed, m3_dataset** train, m3_dataset** validation,
                                    m3_dataset** test);

/* ---- configuration ----------------------------------------------------- */

/* Fill in defaults for a partial model or training config. */
M3_API m3_status m3_model_config_resolve(const char* config_json, char** out);
M3_API m3_status m3_train_config_resolve(const char* config_json, char** out);

/* ---- models ------------------------------------------------------------ */

M3_API m3_status m3_model_create(const char* config_json, const m3_dataset* dataset, uint64_t seed,
                                 m3_model** out);
M3_API m3_status m3_model_load(const char* path, m3_model** out);
M3_API m3_status m3_model_save(const m3_model* model, const char* path);
M3_API void m3_model_free(m3_model* model);
M3_API m3_status m3_model_config(const m3_model* model, char** out);
M3_API size_t m3_model_items(const m3_model* model);

/* Writes the input item table as `item_index v1 ... vd` lines. */
M3_API m3_status m3_model_write_embeddings(const m3_model* model, const char* path);

/* Scores every item for the event after a history of n_events events.
   ctx_in is n_events x (input features), row-major; ctx_out likewise for
   output features; next_ctx_out holds the target event's output context.
   Context pointers may be NULL when the dataset has no such features.
   gates (3 values: tiny, short, long) may be NULL. */
M3_API m3_status m3_model_score(m3_model* model, const size_t* items, const size_t* ctx_in,
                                const size_t* ctx_out, size_t n_events,
                                const size_t* next_ctx_out, double* scores, size_t n_scores,
                                double* gates);

/* Per-record progress; val_map20 is NaN when no validation ran. */
typedef void (*m3_record_fn)(void* user, const char* label, size_t epoch, size_t step, double loss,
                             double val_map20);

/* validation may be NULL. loss_csv_path may be NULL. */
M3_API m3_status m3_model_train(m3_model* model, const m3_dataset* train,
                                const m3_dataset* validation, const char* train_config_json,
                                const char* loss_csv_path, m3_record_fn on_record, void* user);

/* ---- evaluation -------------------------------------------------------- */

/* map receives n_ns values aligned with ns. */
M3_API m3_status m3_evaluate(m3_model* model, const m3_dataset* test, const size_t* ns,
                             size_t n_ns, size_t threads, double* map, size_t* n_examples);

typedef struct m3_metrics_row {
  const char* model;
  const char* subset;
  const char* gate_type;
  const size_t* ns;
  const double* map;
  size_t n_ns;
  size_t n_examples;
} m3_metrics_row;

M3_API m3_status m3_metrics_csv_write(const char* path, const m3_metrics_row* rows,
                                      size_t n_rows);

/* Trains one model per comma-separated encoder subset ("T,S,L,TSL") with
   identical seeds, writes the metrics table, and optionally fills map with
   n_subsets x n_ns values. */
M3_API m3_status m3_ablate(const m3_dataset* train, const m3_dataset* validation,
                           const m3_dataset* test, const char* base_config_json,
                           const char* train_config_json, const char* subsets, const size_t* ns,
                           size_t n_ns, const char* csv_path, double* map,
                           m3_record_fn on_record, void* user);

/* group_by: "context", "ctx_in:<f>" or "ctx_out:<f>". labels (n_labels
   entries, may be NULL) name group indices 0..n_labels-1 in the CSV. */
M3_API m3_status m3_gate_report(m3_model* model, const m3_dataset* data, const char* group_by,
                                const char* const* labels, size_t n_labels,
                                const char* csv_path);

/* ---- long-range dependence --------------------------------------------- */

/* Embeddings come from a file in the format written by
   m3_model_write_embeddings. lags must be strictly ascending. slope receives
   the log-log fit or NaN; dep (n_lags values, may be NULL) receives Dep_L or
   NaN where undefined. */
M3_API m3_status m3_lrd_profile(const m3_dataset* sequences, const char* embeddings_path,
                                const size_t* lags, size_t n_lags, size_t threads,
                                const char* csv_path, double* dep, double* slope);

#ifdef __cplusplus
}
#endif

#endif
