#ifndef SLC_H
#define SLC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SlcStatus {
  SLC_STATUS_OK = 0,
  SLC_STATUS_NULL_POINTER = 1,
  SLC_STATUS_INVALID_UTF8 = 2,
  SLC_STATUS_INVALID_ARGUMENT = 3,
  SLC_STATUS_DUPLICATE_ID = 4,
  SLC_STATUS_MALFORMED_ID = 5,
  SLC_STATUS_DIMENSION_MISMATCH = 6,
  SLC_STATUS_IO = 7,
  SLC_STATUS_PARSE = 8,
  SLC_STATUS_BACKEND = 9,
  SLC_STATUS_BUFFER_TOO_SMALL = 10,
  SLC_STATUS_PANIC = 11,
} SlcStatus;

typedef struct SlcDictionary SlcDictionary;

typedef struct SlcPipeline SlcPipeline;

typedef struct SlcRegistry SlcRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a successful call. The
// pointer stays valid until the next call on the same thread.
const char *slc_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void slc_string_free(char *s);

// Library version as a static string.
const char *slc_version(void);

struct SlcRegistry *slc_registry_new(void);

// Loads a registry file; a missing file yields an empty registry.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
enum SlcStatus slc_registry_load(const char *path, struct SlcRegistry **out);

// # Safety
// `registry` must be a live handle; `path` a valid C string.
enum SlcStatus slc_registry_save(const struct SlcRegistry *registry, const char *path);

// # Safety
// `registry` must be null or a handle not yet freed.
void slc_registry_free(struct SlcRegistry *registry);

// Number of registered concepts; 0 for a null handle.
//
// # Safety
// `registry` must be null or a live handle.
size_t slc_registry_len(const struct SlcRegistry *registry);

// Registers a concept. `embeddings` holds `count` row-major vectors of `dimension` values.
//
// # Safety
// `registry` must be a live handle; `id` and `description` valid C strings; `embeddings`
// must point to `count * dimension` readable doubles.
enum SlcStatus slc_registry_register(struct SlcRegistry *registry,
                                     const char *id,
                                     const char *description,
                                     const double *embeddings,
                                     size_t count,
                                     size_t dimension);

// Writes the scenario embedding of all registered concepts into `out` (capacity `capacity`)
// and its length into `out_len`. Returns `BufferTooSmall` with `out_len` set when `capacity`
// is insufficient.
//
// # Safety
// `registry` must be a live handle; `out` must hold `capacity` writable doubles; `out_len`
// must be writable.
enum SlcStatus slc_registry_scenario_embedding(const struct SlcRegistry *registry,
                                               double *out,
                                               size_t capacity,
                                               size_t *out_len);

// Clusters the registry into `k` meta-concepts. `adapter_refs_json` maps cluster index to
// adapter identifier (object or array); null names them `metac-<index>`.
//
// # Safety
// `registry` must be a live handle; `adapter_refs_json` null or a valid C string; `out`
// writable.
enum SlcStatus slc_dictionary_build(const struct SlcRegistry *registry,
                                    size_t k,
                                    uint64_t seed,
                                    const char *adapter_refs_json,
                                    struct SlcDictionary **out);

// # Safety
// `path` must be a valid C string; `out` writable.
enum SlcStatus slc_dictionary_load(const char *path, struct SlcDictionary **out);

// # Safety
// `dictionary` must be a live handle; `path` a valid C string.
enum SlcStatus slc_dictionary_save(const struct SlcDictionary *dictionary, const char *path);

// # Safety
// `dictionary` must be null or a handle not yet freed.
void slc_dictionary_free(struct SlcDictionary *dictionary);

// Selects the `top_k` adapters for `embedding` (length `dimension`). The selection is written
// to `out_json` as `{"chosen": [{index, adapter_ref, score, weight}], "top_k": n}`.
//
// # Safety
// `dictionary` must be a live handle; `embedding` must hold `dimension` readable doubles;
// `out_json` writable.
enum SlcStatus slc_dictionary_select(const struct SlcDictionary *dictionary,
                                     const double *embedding,
                                     size_t dimension,
                                     size_t top_k,
                                     char **out_json);

// Index of the top-ranked adapter for `embedding`, written to `out_index`.
//
// # Safety
// As for [`slc_dictionary_select`]; `out_index` writable.
enum SlcStatus slc_dictionary_select_index(const struct SlcDictionary *dictionary,
                                           const double *embedding,
                                           size_t dimension,
                                           size_t *out_index);

// Builds a pipeline from a TOML config file (only its model backends are used).
//
// # Safety
// `config_path` must be a valid C string; `out` writable.
enum SlcStatus slc_pipeline_from_config(const char *config_path, struct SlcPipeline **out);

// # Safety
// `pipeline` must be null or a handle not yet freed.
void slc_pipeline_free(struct SlcPipeline *pipeline);

// Answers `question` about `image` (path or URL) for the scenario of every registered
// concept. The full turn (answer, cues, verified cues, audit, adapter, transcript) is written
// to `out_json`.
//
// # Safety
// Handles must be live; strings valid C strings; `out_json` writable.
enum SlcStatus slc_pipeline_ask(const struct SlcPipeline *pipeline,
                                const struct SlcRegistry *registry,
                                const struct SlcDictionary *dictionary,
                                const char *image,
                                const char *question,
                                size_t top_k,
                                bool use_small,
                                bool use_reflection,
                                char **out_json);

// Parses a detector reply against `ids_json` (a JSON array of concept ids). The complete cue
// report is written to `out_json`.
//
// # Safety
// Strings must be valid C strings; `out_json` writable.
enum SlcStatus slc_parse_cue_report(const char *raw_reply, const char *ids_json, char **out_json);

// Scans `raw` for `expected_count` yes/no answers, writing 1 for yes and 0 for no into `out`.
//
// # Safety
// `raw` must be a valid C string; `out` must hold `expected_count` writable bytes.
enum SlcStatus slc_parse_yes_no(const char *raw, size_t expected_count, uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLC_H */
