#ifndef MDRIVE_H
#define MDRIVE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MdStatus {
  MD_OK = 0,
  MD_NULL_ARGUMENT = 1,
  MD_INVALID = 2,
  MD_NUMERICAL = 3,
  MD_IO = 4,
  MD_UTF8 = 5,
  MD_BUFFER_TOO_SMALL = 6,
  MD_OUT_OF_RANGE = 7,
  MD_PANIC = 8,
} MdStatus;

// Which text field of a sample to copy.
typedef enum MdField {
  MD_FIELD_ID = 0,
  MD_FIELD_QUESTION = 1,
  MD_FIELD_ANSWER = 2,
  MD_FIELD_CATEGORY = 3,
} MdField;

// Samples of one dataset split.
typedef struct MdDataset MdDataset;

// Loaded model with its vocabulary.
typedef struct MdModel MdModel;

// Corpus scores. BLEU-4, METEOR, ROUGE-L and exact match lie in `[0,1]`;
// `cider` is negative when fewer than two pairs were scored.
typedef struct MdScores {
  double bleu4;
  double meteor;
  double rouge_l;
  double cider;
  double exact_match;
  uintptr_t count;
} MdScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static version string.
const char *md_version(void);

// Copies the last error message of this thread into `buf`.
//
// # Safety
// `buf` must point to `cap` writable bytes; `needed` may be null.
enum MdStatus md_last_error(char *buf, uintptr_t cap, uintptr_t *needed);

// Loads a checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum MdStatus md_model_load(const char *dir, struct MdModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`md_model_load`] and not be used afterwards.
void md_model_free(struct MdModel *model);

// Number of views, pixels per view side, vocabulary size and visual
// tokens per sample. Any output pointer may be null.
//
// # Safety
// `model` must be a live handle.
enum MdStatus md_model_info(const struct MdModel *model,
                            uintptr_t *views,
                            uintptr_t *image_size,
                            uintptr_t *vocab_size,
                            uintptr_t *visual_tokens);

// Greedy answer for `views` images of `size×size` interleaved RGB bytes,
// laid out one after another in canonical camera order.
//
// # Safety
// `pixels` must hold `views·size·size·3` bytes; `buf` must point to
// `cap` writable bytes.
enum MdStatus md_model_answer(const struct MdModel *model,
                              const uint8_t *pixels,
                              uintptr_t views,
                              uintptr_t size,
                              const char *question,
                              char *buf,
                              uintptr_t cap,
                              uintptr_t *needed);

// Opens a dataset split directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum MdStatus md_dataset_open(const char *dir, struct MdDataset **out);

// Releases a dataset; null is ignored.
//
// # Safety
// `ds` must come from [`md_dataset_open`] and not be used afterwards.
void md_dataset_free(struct MdDataset *ds);

// # Safety
// `ds` must be a live handle and `len` a valid pointer.
enum MdStatus md_dataset_len(const struct MdDataset *ds, uintptr_t *len);

// Copies one text field of sample `index`.
//
// # Safety
// `ds` must be a live handle; `buf` must point to `cap` writable bytes.
enum MdStatus md_dataset_text(const struct MdDataset *ds,
                              uintptr_t index,
                              enum MdField field,
                              char *buf,
                              uintptr_t cap,
                              uintptr_t *needed);

// Copies the views of sample `index` in canonical camera order, each
// `size×size` interleaved RGB. `needed` receives the byte count.
//
// # Safety
// `ds` must be a live handle; `buf` must point to `cap` writable bytes.
enum MdStatus md_dataset_views(const struct MdDataset *ds,
                               uintptr_t index,
                               uint8_t *buf,
                               uintptr_t cap,
                               uintptr_t *needed);

// Scores `n` predictions, each against a single reference.
//
// # Safety
// `predictions` and `references` must each hold `n` valid strings;
// `out` must be a valid pointer.
enum MdStatus md_score(const char *const *predictions,
                       const char *const *references,
                       uintptr_t n,
                       struct MdScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDRIVE_H */
