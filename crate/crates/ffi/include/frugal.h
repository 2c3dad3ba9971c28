#ifndef FRUGAL_H
#define FRUGAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every FFI entry point.
 */
typedef enum FrugalStatus {
  FrugalOk = 0,
  FrugalErrNullArgument = 1,
  FrugalErrInvalidUtf8 = 2,
  FrugalErrParse = 3,
  FrugalErrOverflow = 4,
  FrugalErrUnknownLlm = 5,
  FrugalErrEngine = 6,
  FrugalErrBufferTooSmall = 7,
} FrugalStatus;

typedef struct FrugalCascade FrugalCascade;

typedef struct FrugalMarketplace FrugalMarketplace;

typedef struct FrugalScorer FrugalScorer;

typedef struct FrugalTrace FrugalTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *frugal_last_error_message(void);

/**
 * Parse a line-delimited JSON marketplace into a handle.
 *
 * # Safety
 * `jsonl` must point to a NUL-terminated string; `out` must be writable.
 */
enum FrugalStatus frugal_marketplace_parse(const char *jsonl, struct FrugalMarketplace **out);

/**
 * # Safety
 * `handle` must come from `frugal_marketplace_parse` and not be freed twice.
 */
void frugal_marketplace_free(struct FrugalMarketplace *handle);

/**
 * Parse a line-delimited JSON trace. `reward_fn`: 0 exact match, 1 token F1.
 *
 * # Safety
 * Pointer arguments as in `frugal_marketplace_parse`.
 */
enum FrugalStatus frugal_trace_parse(const char *jsonl,
                                     const struct FrugalMarketplace *marketplace,
                                     int32_t reward_fn,
                                     struct FrugalTrace **out);

/**
 * # Safety
 * `handle` must come from `frugal_trace_parse` and not be freed twice.
 */
void frugal_trace_free(struct FrugalTrace *handle);

/**
 * Load a scorer model from its JSON serialization.
 *
 * # Safety
 * Pointer arguments as in `frugal_marketplace_parse`.
 */
enum FrugalStatus frugal_scorer_load_json(const char *json, struct FrugalScorer **out);

/**
 * # Safety
 * `handle` must come from `frugal_scorer_load_json` and not be freed twice.
 */
void frugal_scorer_free(struct FrugalScorer *handle);

/**
 * Load a cascade config from its JSON serialization.
 *
 * # Safety
 * Pointer arguments as in `frugal_marketplace_parse`.
 */
enum FrugalStatus frugal_cascade_load_json(const char *json, struct FrugalCascade **out);

/**
 * # Safety
 * `handle` must come from `frugal_cascade_load_json` and not be freed twice.
 */
void frugal_cascade_free(struct FrugalCascade *handle);

/**
 * Exact cost of one query in nano-USD (1e-9 USD).
 *
 * # Safety
 * Pointer arguments as in `frugal_marketplace_parse`.
 */
enum FrugalStatus frugal_query_cost(const struct FrugalMarketplace *marketplace,
                                    const char *llm_id,
                                    uint32_t input_tokens,
                                    uint32_t output_tokens,
                                    int64_t *out_nano_usd);

/**
 * Render nano-USD as a decimal USD string into the caller's buffer.
 *
 * # Safety
 * `buf` must point to at least `buf_len` writable bytes.
 */
enum FrugalStatus frugal_format_money(int64_t nano_usd, char *buf, uintptr_t buf_len);

/**
 * Score an (query, answer, llm) triple with the loaded model.
 *
 * # Safety
 * Pointer arguments as in `frugal_marketplace_parse`.
 */
enum FrugalStatus frugal_score(const struct FrugalScorer *scorer,
                               const char *query,
                               const char *answer,
                               const char *llm_id,
                               double *out_score);

/**
 * Replay the cascade on one trace record (looked up by query_id) and
 * return the RouteOutcome as a JSON string. Free it with
 * `frugal_string_free`.
 *
 * # Safety
 * Pointer arguments as in `frugal_marketplace_parse`.
 */
enum FrugalStatus frugal_replay_route(const struct FrugalCascade *cascade,
                                      const struct FrugalScorer *scorer,
                                      const struct FrugalMarketplace *marketplace,
                                      const struct FrugalTrace *trace,
                                      const char *query_id,
                                      char **out_json);

/**
 * # Safety
 * `ptr` must come from this library and not be freed twice.
 */
void frugal_string_free(char *ptr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRUGAL_H */
