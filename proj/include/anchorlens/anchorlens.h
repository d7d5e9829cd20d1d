/* anchorlens C API: shared-library surface for the contamination-analysis
 * lab. All functions return al_status; on failure al_last_error() holds a
 * thread-local message. Handles are opaque and owned by the caller via the
 * matching _free function. */

#ifndef ANCHORLENS_H
#define ANCHORLENS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define AL_API __declspec(dllexport)
#else
#define AL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Exit-code compatible: 0 ok, 2 configuration error, 3 stage/runtime error. */
typedef enum al_status { AL_OK = 0, AL_ERR_CONFIG = 2, AL_ERR_STAGE = 3 } al_status;

AL_API const char* al_version(void);
AL_API int al_abi_version(void);
/* Message from the calling thread's most recent failure ("" when none). */
AL_API const char* al_last_error(void);

/* --- orchestration ------------------------------------------------------ */

/* Run the full pipeline described by a JSON config file. */
AL_API al_status al_pipeline(const char* config_path);

/* Run one named stage (data, pretrain, rlvr, classify, ppl, partial, patch,
 * jsd, nde, auc, ablate, grid, report, lens, steer, neurons) against the
 * config's output directory. extra_json may be NULL or a JSON object with
 * stage-specific overrides (e.g. {"layer":5,"component":"mlp"}). */
AL_API al_status al_run_stage(const char* config_path, const char* stage,
                              const char* extra_json);

/* Name of the idx-th pipeline stage (0-based); NULL past the end. */
AL_API const char* al_pipeline_stage(int idx);

/* --- handles -------------------------------------------------------------- */

typedef struct al_checkpoint al_checkpoint;
typedef struct al_evalset al_evalset;

AL_API al_status al_checkpoint_load(const char* path, al_checkpoint** out);
/* model_json: JSON object of model fields (n_layers, d_hidden, d_mlp,
 * n_heads, vocab_size, max_seq_len, norm_eps), all optional. */
AL_API al_status al_checkpoint_init(const char* model_json, uint64_t seed, const char* label,
                                    al_checkpoint** out);
AL_API al_status al_checkpoint_save(const al_checkpoint* ckpt, const char* path);
AL_API void al_checkpoint_free(al_checkpoint* ckpt);
/* JSON description (config, label, seed, parameter count) into buf. */
AL_API al_status al_checkpoint_info(const al_checkpoint* ckpt, char* buf, size_t cap);

AL_API al_status al_evalset_load(const char* path, al_evalset** out);
AL_API al_status al_evalset_save(const al_evalset* s, const char* path);
AL_API void al_evalset_free(al_evalset* s);
/* Number of items; negative on error. */
AL_API int al_evalset_size(const al_evalset* s);

/* --- model evaluation ------------------------------------------------------ */

/* Sample a completion. temperature 0 is greedy; stop_token < 0 disables the
 * stop condition (the stop token, when hit, is included in the output).
 * out_len receives the completion length, at most out_cap. */
AL_API al_status al_generate(const al_checkpoint* ckpt, const int* prompt, int prompt_len,
                             int max_new, double temperature, uint64_t seed, int stop_token,
                             int* out_tokens, int out_cap, int* out_len);

/* Greedy answer text for one eval item (NUL-terminated into buf). */
AL_API al_status al_greedy_answer(const al_checkpoint* ckpt, const al_evalset* s, int item_id,
                                  char* buf, size_t cap);

/* Greedy exact-match accuracy over a split ("pretrain_only",
 * "eval_contaminated", "eval_clean"). */
AL_API al_status al_accuracy(const al_checkpoint* ckpt, const al_evalset* s, const char* split,
                             double* out);

/* exp(mean NLL) of the answer tokens; full_text nonzero scores the prompt
 * tokens as well. Token ids, not characters. */
AL_API al_status al_perplexity(const al_checkpoint* ckpt, const int* prompt, int prompt_len,
                               const int* answer, int answer_len, int full_text, double* out);

/* --- pure math -------------------------------------------------------------- */

/* Jensen-Shannon divergence, base 2, in [0,1]. Inputs must each sum to 1
 * within 1e-6. */
AL_API al_status al_jsd(const double* p, const double* q, int n, double* out);

/* LCS-based ROUGE-L; any of f/precision/recall may be NULL. */
AL_API al_status al_rouge_l(const int* candidate, int cand_len, const int* reference,
                            int ref_len, double* f, double* precision, double* recall);

#ifdef __cplusplus
}
#endif

#endif /* ANCHORLENS_H */
