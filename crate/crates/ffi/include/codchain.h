#ifndef CODCHAIN_H
#define CODCHAIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_POINTER = 1,
  CC_STATUS_INVALID_UTF8 = 2,
  CC_STATUS_INVALID_ARGUMENT = 3,
  CC_STATUS_PARSE = 4,
  CC_STATUS_IO = 5,
  CC_STATUS_MODEL = 6,
  CC_STATUS_PANIC = 7,
} CcStatus;

typedef enum CcSystem {
  CC_SYSTEM_ICD9 = 9,
  CC_SYSTEM_ICD10 = 10,
} CcSystem;

// Causal-relationship table.
typedef struct CcGraph CcGraph;

// Trained encoder-decoder.
typedef struct CcModel CcModel;

// Corpus BLEU. `p2` is meaningful only when `has_p2` is true.
typedef struct CcBleu {
  double p1;
  double p2;
  bool has_p2;
  double bp;
  double score;
} CcBleu;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *cc_last_error(void);

// Library version as a static NUL-terminated string.
const char *cc_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void cc_string_free(char *s);

// Normalizes `raw` into dot-free uppercase form. `system` is a `CcSystem`.
//
// # Safety
// `raw` must be a NUL-terminated string; `out` must be writable.
enum CcStatus cc_normalize_code(const char *raw, uint32_t system, char **out);

// Loads an ACME table from a file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CcStatus cc_graph_load(const char *path, struct CcGraph **out);

// Parses an ACME table held in memory.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum CcStatus cc_graph_parse(const char *text, struct CcGraph **out);

// # Safety
// `graph` must come from `cc_graph_load` or `cc_graph_parse`, or be null.
void cc_graph_free(struct CcGraph *graph);

// Number of table lines read.
//
// # Safety
// `graph` must be a live handle; `out` must be writable.
enum CcStatus cc_graph_rule_count(const struct CcGraph *graph, size_t *out);

// Whether `cause` may directly lead to `effect`. Codes must be normalized.
//
// # Safety
// `graph` must be a live handle; strings NUL-terminated; `out` writable.
enum CcStatus cc_graph_is_valid_pair(const struct CcGraph *graph,
                                     const char *cause,
                                     const char *effect,
                                     bool *out);

// Checks a chain, underlying cause first. `first_bad` receives the index
// of the first invalid pair, or -1.
//
// # Safety
// `codes` must hold `n` NUL-terminated strings; outputs must be writable.
enum CcStatus cc_graph_chain_is_valid(const struct CcGraph *graph,
                                      const char *const *codes,
                                      size_t n,
                                      bool *valid,
                                      ptrdiff_t *first_bad);

// Loads a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CcStatus cc_model_load(const char *path, struct CcModel **out);

// # Safety
// `model` must come from `cc_model_load`, or be null.
void cc_model_free(struct CcModel *model);

// Proposes up to `beam_size` chains for priority-ordered source codes.
// `out_json` receives a JSON array of `{chain, log_prob, finished,
// edge_valid}`, best first. `graph` may be null unless `constrained`.
// `system` is a `CcSystem`.
//
// # Safety
// Handles must be live or null as documented; `codes` must hold `n`
// NUL-terminated strings; `out_json` must be writable.
enum CcStatus cc_model_translate(const struct CcModel *model,
                                 const struct CcGraph *graph,
                                 const char *const *codes,
                                 size_t n,
                                 uint32_t system,
                                 size_t beam_size,
                                 size_t max_len,
                                 bool constrained,
                                 char **out_json);

// Corpus BLEU over `n` candidate/reference pairs given as
// whitespace-separated code sequences.
//
// # Safety
// `candidates` and `references` must each hold `n` NUL-terminated strings;
// `out` must be writable.
enum CcStatus cc_corpus_bleu(const char *const *candidates,
                             const char *const *references,
                             size_t n,
                             struct CcBleu *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODCHAIN_H */
