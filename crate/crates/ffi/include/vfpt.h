#ifndef VFPT_H
#define VFPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VfptStatus {
  VFPT_STATUS_OK = 0,
  VFPT_STATUS_NULL_POINTER = 1,
  VFPT_STATUS_INVALID_ARGUMENT = 2,
  VFPT_STATUS_SHAPE = 3,
  VFPT_STATUS_CONFIG = 4,
  VFPT_STATUS_FORMAT = 5,
  VFPT_STATUS_IO = 6,
  VFPT_STATUS_CONTRACT = 7,
  VFPT_STATUS_BUFFER_TOO_SMALL = 8,
  VFPT_STATUS_PANIC = 9,
} VfptStatus;

// Tensors of one checkpoint container, in file order.
typedef struct VfptCheckpoint VfptCheckpoint;

// A tuned model with the input normalization it was trained with.
typedef struct VfptModel VfptModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vfpt_version(void);

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `cap`) and returns the length needed including the NUL; 0 when
// the last call succeeded.
//
// # Safety
// `buf` must be valid for `cap` bytes or null with `cap == 0`.
uintptr_t vfpt_last_error(char *buf, uintptr_t cap);

// Unnormalized forward DFT of `n` complex values.
//
// # Safety
// All four buffers must hold `n` doubles.
enum VfptStatus vfpt_fft(const double *re,
                         const double *im,
                         uintptr_t n,
                         double *out_re,
                         double *out_im);

// Inverse DFT (scaled by `1/n`), so `ifft(fft(x)) = x`.
//
// # Safety
// All four buffers must hold `n` doubles.
enum VfptStatus vfpt_ifft(const double *re,
                          const double *im,
                          uintptr_t n,
                          double *out_re,
                          double *out_im);

// Real part of the 2D DFT of a row-major `m × d` block.
//
// # Safety
// `input` and `output` must hold `m·d` doubles.
enum VfptStatus vfpt_fourier2d_real(const double *input, uintptr_t m, uintptr_t d, double *output);

// Real part of the 1D DFT along the rows (`axis = 0`) or columns (`axis = 1`)
// of a row-major `m × d` block.
//
// # Safety
// `input` and `output` must hold `m·d` doubles.
enum VfptStatus vfpt_fourier1d_real(const double *input,
                                    uintptr_t m,
                                    uintptr_t d,
                                    uint32_t axis,
                                    double *output);

// Prompt parameters for `length` prompts of width `width` in every one of
// `depth` layers (`deep != 0`) or the first layer only.
//
// # Safety
// `count` must be a valid pointer.
enum VfptStatus vfpt_prompt_parameter_count(uintptr_t depth,
                                            uintptr_t length,
                                            uintptr_t width,
                                            uint32_t deep,
                                            uintptr_t *count);

// Learning rate at `step` of a linear-warmup cosine schedule.
double vfpt_cosine_lr(uintptr_t step,
                      uintptr_t total_steps,
                      double base_lr,
                      uintptr_t warmup_steps);

// Runs the built-in oracle suites; `failed` receives the number of failing checks.
//
// # Safety
// `failed` must be a valid pointer.
enum VfptStatus vfpt_selftest(uint32_t *failed);

// Loads a checkpoint container.
//
// # Safety
// `path` must be a NUL-terminated string and `handle` a valid pointer.
enum VfptStatus vfpt_checkpoint_load(const char *path, struct VfptCheckpoint **handle);

// # Safety
// `handle` must come from [`vfpt_checkpoint_load`] and not be used afterwards.
void vfpt_checkpoint_free(struct VfptCheckpoint *handle);

// # Safety
// `handle` and `len` must be valid pointers.
enum VfptStatus vfpt_checkpoint_len(const struct VfptCheckpoint *handle, uintptr_t *len);

// Copies the name of tensor `index` into `buf` (NUL-terminated); `needed`
// receives the size including the NUL. Fails with `BufferTooSmall` when `cap` is short.
//
// # Safety
// `buf` must be valid for `cap` bytes; `needed` must be a valid pointer.
enum VfptStatus vfpt_checkpoint_name(const struct VfptCheckpoint *handle,
                                     uintptr_t index,
                                     char *buf,
                                     uintptr_t cap,
                                     uintptr_t *needed);

// Shape of tensor `index`: `rank` receives its rank and the first
// `min(rank, dims_cap)` dimensions go to `dims`.
//
// # Safety
// `dims` must be valid for `dims_cap` values; `rank` must be a valid pointer.
enum VfptStatus vfpt_checkpoint_shape(const struct VfptCheckpoint *handle,
                                      uintptr_t index,
                                      uintptr_t *dims,
                                      uintptr_t dims_cap,
                                      uintptr_t *rank);

// Copies the row-major values of tensor `index`; `cap` must be at least its element count.
//
// # Safety
// `data` must be valid for `cap` doubles.
enum VfptStatus vfpt_checkpoint_data(const struct VfptCheckpoint *handle,
                                     uintptr_t index,
                                     double *data,
                                     uintptr_t cap);

// Loads a tuned model checkpoint written by `vfpt tune`. `config` is the run
// configuration it was tuned with (the `config.toml` next to it), or null for defaults.
//
// # Safety
// `config` must be null or NUL-terminated, `model` NUL-terminated and `handle` valid.
enum VfptStatus vfpt_model_load(const char *config, const char *model, struct VfptModel **handle);

// # Safety
// `handle` must come from [`vfpt_model_load`] and not be used afterwards.
void vfpt_model_free(struct VfptModel *handle);

// Input geometry and class count of a loaded model.
//
// # Safety
// Every pointer must be valid.
enum VfptStatus vfpt_model_info(const struct VfptModel *handle,
                                uintptr_t *channels,
                                uintptr_t *image_size,
                                uintptr_t *num_classes);

// Logits `[batch, classes]` for raw images `[batch, channels, size, size]`
// (row-major); the model's normalization is applied here.
//
// # Safety
// `images` must hold `batch·channels·size²` doubles and `logits` `cap` doubles.
enum VfptStatus vfpt_model_predict(const struct VfptModel *handle,
                                   const double *images,
                                   uintptr_t batch,
                                   double *logits,
                                   uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VFPT_H */
