/* C interface to the deauville library. Every function returns a dv_status;
 * on failure dv_last_error() holds a message for the calling thread.
 * Strings returned through char** are owned by the caller and released
 * with dv_string_free. */
#ifndef DEAUVILLE_H
#define DEAUVILLE_H

#include <stddef.h>
#include <stdint.h>

#if defined(DV_BUILDING_LIBRARY)
#define DV_API __attribute__((visibility("default")))
#else
#define DV_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dv_status {
    DV_OK = 0,
    DV_ERR_IO = 1,
    DV_ERR_VALIDATION = 2,
    DV_ERR_DIVERGENCE = 3,
    DV_ERR_UNRECOVERABLE = 4,
    DV_ERR_INTERNAL = 5
} dv_status;

typedef enum dv_model_kind { DV_MODEL_TEXT = 0, DV_MODEL_VISION = 1, DV_MODEL_MULTIMODAL = 2 } dv_model_kind;

typedef enum dv_weighting { DV_WEIGHT_LINEAR = 0, DV_WEIGHT_QUADRATIC = 1 } dv_weighting;

typedef struct dv_grammar dv_grammar;
typedef struct dv_model dv_model;
typedef struct dv_experiment dv_experiment;

typedef void (*dv_log_fn)(const char* message, void* user);

DV_API const char* dv_version(void);
DV_API const char* dv_last_error(void);
DV_API void dv_string_free(char* s);
/* Progress messages from long operations; NULL disables. */
DV_API void dv_set_log_callback(dv_log_fn fn, void* user);

/* ---- corpus */
DV_API dv_status dv_corpus_generate(const char* spec_path, const char* out_dir);
DV_API dv_status dv_corpus_stats(const char* corpus_dir, char** out_json);

/* ---- extraction; grammar_path may be NULL for the built-in grammar */
DV_API dv_status dv_grammar_load(const char* grammar_path, dv_grammar** out);
DV_API void dv_grammar_free(dv_grammar* grammar);
/* Exam-level label of free text: 1..5, or 0 when no score is mentioned. */
DV_API dv_status dv_grammar_label(const dv_grammar* grammar, const char* text, int* out_label, size_t* out_mentions);
DV_API dv_status dv_grammar_redact(const dv_grammar* grammar, const char* text, char** out_text);

DV_API dv_status dv_extract_labels(const char* corpus_dir, const char* grammar_path, const char* out_csv);
/* Writes redacted.jsonl and labels.csv into out_dir. */
DV_API dv_status dv_extract_redact(const char* corpus_dir, const char* grammar_path, const char* out_dir);
/* CSV: rank, n, ngram, frequency. */
DV_API dv_status dv_extract_ngrams(const char* corpus_dir, const char* grammar_path, const char* term,
                                   size_t window, char** out_csv);

/* ---- preprocess
 * Extracts, redacts, normalizes and tokenizes a corpus. vocab_path is
 * loaded when it exists, otherwise trained and written there. */
DV_API dv_status dv_preprocess_run(const char* corpus_dir, const char* config_path, const char* vocab_path,
                                   const char* out_dir);

/* ---- encoders; data_dir is a preprocess output directory */
DV_API dv_status dv_encoder_pretrain_generic(const char* config_path, const char* data_dir, const char* out_dir);
/* epochs < 0 or lr <= 0 keep the config/default values. */
DV_API dv_status dv_encoder_adapt(const char* base_dir, const char* data_dir, const char* config_path, int epochs,
                                  double lr, const char* out_dir);
DV_API dv_status dv_encoder_perplexity(const char* checkpoint_dir, const char* data_dir, double mask_rate,
                                       uint64_t seed, double* out_perplexity);

/* ---- classifiers
 * split_csv rows: exam_id,set with set in {train,val,test}. The config
 * holds training values plus optional data/corpus/encoder paths, which
 * the non-NULL arguments override. */
DV_API dv_status dv_train(dv_model_kind kind, const char* split_csv, const char* config_path, const char* data_dir,
                          const char* corpus_dir, const char* encoder_dir, const char* out_dir);
DV_API dv_status dv_model_load(const char* bundle_dir, dv_model** out);
DV_API void dv_model_free(dv_model* model);
DV_API dv_status dv_model_kind_of(const dv_model* model, dv_model_kind* out_kind);
/* Class probabilities of one report given as impression and findings text. */
DV_API dv_status dv_model_predict_text(const dv_model* model, const char* impression, const char* findings,
                                       double out_probs[5], int* out_class);
/* Scores every exam of a raw corpus; CSV exam_id,p1..p5,predicted. */
DV_API dv_status dv_predict_corpus(const dv_model* model, const char* corpus_dir, const char* out_csv);

/* ---- evaluation */
DV_API dv_status dv_weighted_kappa(const double* counts, size_t n, dv_weighting weighting, double* out_kappa);
DV_API dv_status dv_eval_expert(const char* expert_csv, const char* truth_csv, dv_weighting weighting,
                                char** out_json);

/* ---- experiments */
DV_API dv_status dv_experiment_load(const char* config_path, dv_experiment** out);
DV_API void dv_experiment_free(dv_experiment* experiment);
DV_API dv_status dv_experiment_set_output(dv_experiment* experiment, const char* output_dir);
DV_API dv_status dv_experiment_validate(const dv_experiment* experiment);
/* stop_after may be NULL or a stage name. */
DV_API dv_status dv_experiment_run(const dv_experiment* experiment, const char* stop_after, char** out_dir);
DV_API dv_status dv_resume(const char* output_dir, char** out_summary_json);
/* Comma-separated stage names in execution order. */
DV_API const char* dv_stage_names(void);

#ifdef __cplusplus
}
#endif

#endif
