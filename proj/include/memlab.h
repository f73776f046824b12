/* memlab — desk-scale laboratory for studying language-model memorization.
 *
 * C API over the memlab core: opaque handles, integer status codes, and a
 * thread-local error message. All heavyweight options are passed as JSON
 * strings (schemas below); artifacts are exchanged through files so the
 * library stays usable from any language with a C FFI.
 *
 * Buffer convention: functions that return variable-length data take
 * (buf, cap, len). Call with buf == NULL (or cap == 0) to query the required
 * length; *len excludes the terminating NUL that is written when cap
 * suffices. Binary checkpoint files are little-endian.
 */
#ifndef MEMLAB_H
#define MEMLAB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum memlab_status {
    MEMLAB_OK = 0,
    MEMLAB_ERR_INVALID_ARGUMENT = 1,
    MEMLAB_ERR_IO = 2,
    MEMLAB_ERR_FORMAT = 3,
    MEMLAB_ERR_STATE = 4,
    MEMLAB_ERR_NUMERIC = 5,
    MEMLAB_ERR_INTERNAL = 6
} memlab_status;

typedef struct memlab_corpus memlab_corpus;
typedef struct memlab_model memlab_model;

const char* memlab_version(void);
const char* memlab_status_name(memlab_status s);

/* message for the most recent failure on this thread */
const char* memlab_last_error(void);

/* thread budget for internal parallel loops; 0 restores the hardware default */
void memlab_set_threads(int n);

/* --- corpus ----------------------------------------------------------------
 * data files: .txt (one record per line) or .jsonl with {"id","text"} or
 * pre-split {"id","x","y"}.
 * options JSON: {"mode":"char"|"word", "split_ratio":0.5,
 *                "fractions":[0.8,0.1,0.1], "seed":0, "context_len":256}
 */
memlab_status memlab_corpus_build(const char* data_path, const char* options_json,
                                  memlab_corpus** out);
/* writes a deterministic synthetic corpus data file.
 * options JSON: {"records":200,"seed":1,"style":"pairs"|"plain"} */
memlab_status memlab_corpus_synth(const char* out_path, const char* options_json);
memlab_status memlab_corpus_open(const char* data_path, const char* vocab_path,
                                 const char* splits_path, memlab_corpus** out);
memlab_status memlab_corpus_save(const memlab_corpus* c, const char* vocab_path,
                                 const char* splits_path);
/* {"vocab_size":..,"mode":..,"pairs":..,"train":..,"test":..,"validation":..} */
memlab_status memlab_corpus_info(const memlab_corpus* c, char* buf, size_t cap,
                                 size_t* len);
memlab_status memlab_corpus_encode(const memlab_corpus* c, const char* text,
                                   int32_t* ids, size_t cap, size_t* len);
memlab_status memlab_corpus_decode(const memlab_corpus* c, const int32_t* ids,
                                   size_t n, char* buf, size_t cap, size_t* len);
void memlab_corpus_free(memlab_corpus* c);

/* --- models ------------------------------------------------------------------
 * config JSON: {"n_layers":4,"n_heads":4,"d_model":128,"d_ff":512,
 *               "context_len":256,"vocab_size":<required>,"seed":0}
 */
memlab_status memlab_model_create(const char* config_json, memlab_model** out);
memlab_status memlab_model_load(const char* path, memlab_model** out);
memlab_status memlab_model_save(const memlab_model* m, const char* path);
/* {"config":{...},"params":N,"adapters":bool} */
memlab_status memlab_model_info(const memlab_model* m, char* buf, size_t cap,
                                size_t* len);

/* full-parameter training on corpus records.
 * options JSON: {"epochs":50,"lr":0.001,"batch_size":8,"pack":true,
 *                "stream_len":48,"dup":1,"seed":0,
 *                "splits":["train","test","validation"]}
 */
memlab_status memlab_model_train(memlab_model* m, const memlab_corpus* c,
                                 const char* options_json);

/* low-rank adapter fine-tuning on the split's (x -> y) pairs.
 * options JSON: {"split":"train","epochs":8,"lr":0.0005,"rank":8,
 *                "alpha":16,"batch_size":8,"seed":0}
 */
memlab_status memlab_model_finetune(memlab_model* m, const memlab_corpus* c,
                                    const char* options_json);

/* mean cross-entropy (nats/token) of target given [BOS, context] */
memlab_status memlab_model_loss(const memlab_model* m, const int32_t* context,
                                size_t n_context, const int32_t* target,
                                size_t n_target, double* loss);
/* sum of token log-probabilities, first token conditioned on BOS */
memlab_status memlab_model_logprob(const memlab_model* m, const int32_t* seq,
                                   size_t n, double* logprob);
/* options JSON: {"max_new_tokens":32,"top_k":0,"temperature":1.0,
 *                "greedy":true,"seed":0} */
memlab_status memlab_model_generate(const memlab_model* m, const int32_t* prompt,
                                    size_t n, const char* options_json,
                                    int32_t* out_ids, size_t cap, size_t* len);
void memlab_model_free(memlab_model* m);

/* --- memorization pipeline ---------------------------------------------------
 * inducer config JSON (shared by train/extract/gcg/audit "inducer" blocks):
 *   {"max_it":10,"pool_capacity":256,"finetune_epochs":8,"finetune_lr":0.0005,
 *    "adapter_rank":8,"adapter_alpha":16,"top_k":48,"beams":4,"lambda":0.1,
 *    "max_prompt_len":16,"trials":5,"tau":1.0,"rejection_sampling":true,
 *    "seed":0}
 */

/* Trains the memory-inducing model in place against a frozen target.
 * config JSON: inducer config plus {"split":"train"}.
 * base_model (optional) is a pre-trained language model used as the frozen
 * readability reference; when NULL, a snapshot of the incoming inducer is
 * used instead. pool_jsonl_path / diag_csv_path are optional outputs (NULL to
 * skip); base_out (optional) receives the readability model actually used. */
memlab_status memlab_inducer_train(memlab_model* inducer, const memlab_model* target,
                                   const memlab_corpus* c,
                                   const memlab_model* base_model,
                                   const char* config_json,
                                   const char* pool_jsonl_path,
                                   const char* diag_csv_path, memlab_model** base_out);

/* Best-of-k extraction over a split.
 * config JSON: {"method":"induced"|"ps"|"untrained","split":"test","trials":5,
 *               "seed":0,"inducer":{...inducer config...}}
 * inducer/base may be NULL for method "ps". scores_csv_path optional.
 * result JSON: {"method":..,"trials":..,"n":..,"avg_mem":..,"hit_rate":..} */
memlab_status memlab_extract(const memlab_model* target, const memlab_model* inducer,
                             const memlab_model* base, const memlab_corpus* c,
                             const char* config_json, const char* scores_csv_path,
                             char* result_json, size_t cap, size_t* len);

/* Greedy-coordinate-gradient refinement, cold (random init) or warm
 * (inducer-provided init).
 * config JSON: {"arm":"cold"|"warm","split":"test","samples":20,
 *               "n_tokens":16,"num_steps":100,"top_k":48,"batch":64,
 *               "include_current":true,"seed":0,
 *               "inducer":{...required for warm...}}
 * result JSON: {"arm":..,"n":..,"avg_final_loss":..,"avg_final_mem":..} */
memlab_status memlab_gcg(const memlab_model* target, const memlab_model* inducer,
                         const memlab_model* base, const memlab_corpus* c,
                         const char* config_json, const char* trace_csv_path,
                         char* result_json, size_t cap, size_t* len);

/* Dataset-level audit: fine-tunes a proxy on the corpus, trains (or reuses)
 * an inducer against it, scores proxy / suspect_trained / suspect_untrained
 * on the eval split, and applies the two-sample z-test decision rule.
 * config JSON: {"alpha":0.05,"trials":5,"eval_split":"test","seed":0,
 *               "proxy":{model config},"proxy_train":{train options},
 *               "inducer_model":{model config},"inducer":{inducer config}}
 * inducer/base handles are optional (reused when given).
 * result JSON mirrors the report written to report_json_path. */
memlab_status memlab_audit(const memlab_corpus* c, const memlab_model* suspect_trained,
                           const memlab_model* suspect_untrained,
                           const memlab_model* inducer, const memlab_model* base,
                           const char* config_json, const char* report_json_path,
                           char* result_json, size_t cap, size_t* len);

/* --- metrics & statistics --------------------------------------------------- */

/* ROUGE-L precision of generated against reference (word-level) */
memlab_status memlab_mem_score(const char* generated, const char* reference,
                               double* score);
/* LCS length over whitespace-tokenized word lists */
memlab_status memlab_lcs_length(const char* a, const char* b, size_t* length);
/* Welch-style two-sample z test, two-sided p */
memlab_status memlab_ztest(const double* a, size_t na, const double* b, size_t nb,
                           double* z, double* p);

#ifdef __cplusplus
}
#endif

#endif /* MEMLAB_H */
