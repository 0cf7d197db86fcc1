#ifndef MGSA_H
#define MGSA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum MgsaStatus {
  MGSA_STATUS_OK = 0,
  MGSA_STATUS_NULL_ARGUMENT = 1,
  MGSA_STATUS_INVALID_UTF8 = 2,
  MGSA_STATUS_IO = 3,
  MGSA_STATUS_PARSE = 4,
  MGSA_STATUS_INVALID_GRAPH = 5,
  MGSA_STATUS_CHECKPOINT = 6,
  MGSA_STATUS_INTERNAL = 7,
} MgsaStatus;

// Opaque handle to a loaded model.
typedef struct MgsaModel MgsaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string.
// Valid until the next call into this library on the same thread.
const char *mgsa_last_error(void);

// Loads a checkpoint written by `mgsa train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MgsaStatus mgsa_model_load(const char *path, struct MgsaModel **out);

// Releases a handle from [`mgsa_model_load`]. Null is ignored.
//
// # Safety
// `model` must come from [`mgsa_model_load`] and not be used afterwards.
void mgsa_model_free(struct MgsaModel *model);

// Vocabulary size of a loaded model.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum MgsaStatus mgsa_model_vocab_size(const struct MgsaModel *model, size_t *out);

// Generates text for a graph given as a JSON array of
// `[head, relation, tail]` string triples. `beam` 0 or 1 decodes greedily.
//
// # Safety
// `model` must be a live handle, `triples_json` NUL-terminated, and `out` a
// valid pointer. The string stored in `out` must be released with
// [`mgsa_string_free`].
enum MgsaStatus mgsa_generate(const struct MgsaModel *model,
                              const char *triples_json,
                              uint32_t beam,
                              char **out);

// Structure matrices of a graph as JSON with keys `units`, `rel_e`, `adj`
// and `rel_w`, using the default model configuration.
//
// # Safety
// `triples_json` must be NUL-terminated and `out` a valid pointer. The
// string stored in `out` must be released with [`mgsa_string_free`].
enum MgsaStatus mgsa_structure_matrices(const char *triples_json, char **out);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void mgsa_string_free(char *s);

// Library version, statically allocated.
const char *mgsa_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGSA_H */
