/* tinydistill C API: transformer distillation pipeline behind opaque
 * handles and status codes. All functions are thread-safe as long as a
 * given handle is used from one thread at a time; error messages are
 * thread-local. Strings returned through char** out-parameters are owned
 * by the caller and must be released with td_string_free(). */

#ifndef TINYDISTILL_H
#define TINYDISTILL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum td_status {
    TD_OK = 0,
    TD_ERROR = 1,    /* runtime failure (I/O, divergence, corrupt file) */
    TD_BAD_ARGS = 2  /* usage or configuration error */
} td_status;

/* Message describing the most recent failure on this thread. */
const char* td_last_error(void);

const char* td_version(void);

/* Log verbosity: "debug", "info", "warn", "error" or "off". */
td_status td_set_log_level(const char* level);

void td_string_free(char* s);

/* --- pipeline stages -------------------------------------------------------
 * Each runner loads a JSON stage config, applies the optional seed override
 * (seed_override >= 0; pass -1 to keep the config seed), and writes the
 * checkpoint, metric logs and run manifest under out_dir. */

td_status td_train_teacher(const char* config_path, const char* out_dir,
                           int64_t seed_override);
td_status td_general_distill(const char* config_path, const char* out_dir,
                             int64_t seed_override);
td_status td_task_distill(const char* config_path, const char* out_dir,
                          int64_t seed_override);

/* Evaluates a checkpoint on one split ("train" | "dev" | "test").
 * checkpoint may be NULL to use the config's init_checkpoint. On success
 * *metrics_json holds an object with accuracy/loss/count and, for binary
 * tasks, mcc. */
td_status td_evaluate(const char* config_path, const char* split,
                      const char* checkpoint, const char* out_dir,
                      char** metrics_json);

/* Word-replacement data augmentation. glove_path may be NULL; the teacher
 * checkpoint must carry an MLM head. include_original != 0 keeps each
 * source example ahead of its n_a variants. */
td_status td_augment(const char* input_tsv, const char* output_tsv,
                     const char* glove_path, const char* teacher_checkpoint,
                     double p_t, int32_t n_a, int32_t k, uint64_t seed,
                     int32_t include_original, const char* out_dir);

/* Runs an ablation recipe ("procedures" | "objectives" | "mapping") and
 * returns the report table. max_threads <= 0 reads DISTILL_THREADS (default:
 * logical cores). */
td_status td_ablate(const char* recipe, const char* config_path,
                    const char* out_dir, int32_t max_threads, char** report_tsv);

/* Checkpoint summary as JSON: config, parameter count, lineage, vocab and
 * tensor inventory, recorded dev metric. */
td_status td_inspect_checkpoint(const char* path, char** summary_json);

/* --- model handles ---------------------------------------------------------
 * Programmatic access to a loaded checkpoint. */

typedef struct td_model td_model;

td_status td_model_load(const char* checkpoint_path, td_model** out);
void td_model_free(td_model* model);
int64_t td_model_parameter_count(const td_model* model);
td_status td_model_config_json(const td_model* model, char** config_json);
/* Dev-set style evaluation of the handle against a TSV file. */
td_status td_model_evaluate_tsv(const td_model* model, const char* tsv_path,
                                int32_t batch_size, char** metrics_json);

#ifdef __cplusplus
}
#endif

#endif /* TINYDISTILL_H */
