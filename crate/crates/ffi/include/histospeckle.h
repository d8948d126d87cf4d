#ifndef HISTOSPECKLE_H
#define HISTOSPECKLE_H

/* Generated by the build script from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define HS_OK 0

// Configuration or contract violation (bad arguments, mismatched sizes).
#define HS_ERR_USAGE 2

// Data, format, or I/O failure.
#define HS_ERR_DATA 3

// Non-finite values encountered.
#define HS_ERR_NUMERIC 4

// A required pointer argument was null.
#define HS_ERR_NULL 5

// Internal failure (a bug, reported rather than crashing the caller).
#define HS_ERR_INTERNAL 6

// Opaque dataset handle.
typedef struct HsDataset HsDataset;

// Opaque generator handle.
typedef struct HsGenerator HsGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Most recent error message on this thread. The pointer stays valid
// until the next failing call on the same thread; never free it.
const char *hs_last_error_message(void);

// Opens a dataset container file. Returns null on failure.
//
// # Safety
// `path` must be a valid NUL-terminated string.
struct HsDataset *hs_dataset_open(const char *path);

// Releases a dataset handle (null is a no-op).
//
// # Safety
// `ds` must be a pointer returned by [`hs_dataset_open`], freed once.
void hs_dataset_free(struct HsDataset *ds);

// Label/speckle edge length of the dataset's records (0 for null input).
//
// # Safety
// `ds` must be a valid dataset handle or null.
uint32_t hs_dataset_extent(const struct HsDataset *ds);

// Record counts per split.
//
// # Safety
// `ds` must be a valid dataset handle; count pointers may be null to skip.
int32_t hs_dataset_counts(const struct HsDataset *ds,
                          uint32_t *train,
                          uint32_t *val,
                          uint32_t *test);

// Copies one record's speckle and/or label into caller buffers of
// `extent * extent` floats each (either pointer may be null to skip).
//
// # Safety
// `ds` must be a valid dataset handle; non-null buffers must hold at
// least `extent * extent` floats.
int32_t hs_dataset_record(const struct HsDataset *ds,
                          uint32_t split,
                          uint64_t index,
                          float *speckle,
                          float *label);

// Loads the generator stored in a checkpoint file, reconstructing its
// architecture from the saved tensor shapes. Returns null on failure.
//
// # Safety
// `path` must be a valid NUL-terminated string.
struct HsGenerator *hs_generator_load(const char *path, uint32_t extent);

// Releases a generator handle (null is a no-op).
//
// # Safety
// `gen` must be a pointer returned by [`hs_generator_load`], freed once.
void hs_generator_free(struct HsGenerator *gen);

// Reconstructs an image from a speckle frame. Both buffers hold
// `extent * extent` floats, where `extent` is the value the generator
// was loaded with.
//
// # Safety
// `gen` must be a valid generator handle; `speckle` and `out` must hold
// `extent * extent` floats each.
int32_t hs_generator_reconstruct(const struct HsGenerator *gen, const float *speckle, float *out);

// Structural similarity between two images of `h * w` floats.
//
// # Safety
// `a` and `b` must hold `h * w` floats; `out` must be a valid pointer.
int32_t hs_ssim(const float *a, const float *b, uint32_t h, uint32_t w, double *out);

// Runs the fiber simulator once: propagates a label of `extent * extent`
// pixels through a seeded transmission matrix with `modes` rows and
// writes the percentile-normalized speckle frame (sqrt(modes) edge
// length, `modes` floats) to `out`.
//
// # Safety
// `label` must hold `extent * extent` floats; `out` must hold `modes`
// floats.
int32_t hs_simulate_speckle(const float *label,
                            uint32_t extent,
                            uint32_t modes,
                            uint64_t tm_seed,
                            double percentile,
                            float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HISTOSPECKLE_H */
