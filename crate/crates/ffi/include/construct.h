#ifndef CONSTRUCT_H
#define CONSTRUCT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ConstructStatus {
  CONSTRUCT_STATUS_OK = 0,
  CONSTRUCT_STATUS_NULL_ARGUMENT = 1,
  CONSTRUCT_STATUS_INVALID_UTF8 = 2,
  // An argument was well-formed text but not an acceptable value.
  CONSTRUCT_STATUS_INVALID_INPUT = 3,
  // The model reply could not be parsed.
  CONSTRUCT_STATUS_PARSE_FAILED = 4,
  // A review decision was refused; the registry is unchanged.
  CONSTRUCT_STATUS_REJECTED = 5,
  // The statistic is undefined for this input.
  CONSTRUCT_STATUS_UNDEFINED = 6,
  CONSTRUCT_STATUS_PANIC = 7,
} ConstructStatus;

typedef enum ConstructGranularity {
  CONSTRUCT_GRANULARITY_SENTENCE = 0,
  CONSTRUCT_GRANULARITY_PARAGRAPH = 1,
  CONSTRUCT_GRANULARITY_FULL_TEXT = 2,
} ConstructGranularity;

// Review session over an in-memory candidate registry.
typedef struct ConstructReview ConstructReview;

// Message for the last failed call on this thread, or null. Owned by the
// library; valid until the next call on this thread.
const char *construct_last_error(void);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void construct_string_free(char *s);

// Library version, statically allocated.
const char *construct_version(void);

// Pull the JSON object out of a model reply (fences, surrounding prose and
// trailing commas are tolerated). `out_json` receives the compact object.
//
// # Safety
// `raw` must be a NUL-terminated string; `out_json` a writable pointer.
enum ConstructStatus construct_extract_json(const char *raw, char **out_json);

// Parse a fit-rating reply. `out_rationale` may be null when not wanted.
//
// # Safety
// `raw` must be a NUL-terminated string; `out_fit` writable; `out_rationale`
// null or writable.
enum ConstructStatus construct_parse_fit(const char *raw, uint8_t *out_fit, char **out_rationale);

// Split a text into units. `out_json` receives an array of unit texts.
//
// # Safety
// `text_in` must be a NUL-terminated string; `out_json` writable.
enum ConstructStatus construct_segment(const char *text_in,
                                       enum ConstructGranularity granularity,
                                       char **out_json);

// Nominal Krippendorff's alpha. `units_json` is an array with one array of
// category strings per unit (one entry per coder who coded it).
//
// # Safety
// `units_json` must be a NUL-terminated string; `out_alpha` writable.
enum ConstructStatus construct_krippendorff_alpha(const char *units_json, double *out_alpha);

// Overlap-sampled batch plan over `ids_json` (an array of unit ids).
// `out_json` receives the plan.
//
// # Safety
// `ids_json` must be a NUL-terminated string; `out_json` writable.
enum ConstructStatus construct_plan_batches(const char *ids_json,
                                            size_t batch_size,
                                            double carryover,
                                            size_t classes_per_call_cap,
                                            uint64_t seed,
                                            char **out_json);

// Start a review over a candidate registry (as written to `registry.json`'s
// `data`). Free the handle with [`construct_review_free`].
//
// # Safety
// `registry_json` must be a NUL-terminated string; `out` writable.
enum ConstructStatus construct_review_open(const char *registry_json, struct ConstructReview **out);

// Apply one decision, e.g. `{"subject": "AI Risks", "action": "keep"}`.
// A refused decision returns `Rejected` and leaves the registry unchanged.
//
// # Safety
// `handle` must come from [`construct_review_open`]; `decision_json` must be
// a NUL-terminated string.
enum ConstructStatus construct_review_apply(struct ConstructReview *handle,
                                            const char *decision_json);

// Current folded registry as JSON.
//
// # Safety
// `handle` must come from [`construct_review_open`]; `out_json` writable.
enum ConstructStatus construct_review_state(struct ConstructReview *handle, char **out_json);

// The finalized class set as JSON; `Rejected` before finalize.
//
// # Safety
// `handle` must come from [`construct_review_open`]; `out_json` writable.
enum ConstructStatus construct_review_export(struct ConstructReview *handle, char **out_json);

// Release a review handle. Null is ignored.
//
// # Safety
// `handle` must come from [`construct_review_open`] and not be used afterwards.
void construct_review_free(struct ConstructReview *handle);

#endif  /* CONSTRUCT_H */
