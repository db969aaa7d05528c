#ifndef BIKANET_H
#define BIKANET_H

/* C interface of bikanet-ffi. Mirrors src/lib.rs; tests/header.rs keeps the two in step. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum BikaStatus {
  BIKA_STATUS_OK = 0,
  BIKA_STATUS_NULL_POINTER = 1,
  BIKA_STATUS_INVALID_ARGUMENT = 2,
  BIKA_STATUS_SIZE_MISMATCH = 3,
  BIKA_STATUS_IO = 4,
  BIKA_STATUS_FORMAT = 5,
  BIKA_STATUS_NUMERICAL = 6,
  BIKA_STATUS_CHECKPOINT = 7,
  BIKA_STATUS_INTERNAL = 8,
} BikaStatus;

/**
 * Border handling for [`bika_convolve`].
 */
typedef enum BikaBoundary {
  BIKA_BOUNDARY_REPLICATE = 0,
  BIKA_BOUNDARY_ZERO = 1,
  BIKA_BOUNDARY_CIRCULAR = 2,
} BikaBoundary;

/**
 * A floating-point image with values in [0, 1], stored row-major with
 * interleaved channels.
 */
typedef struct BikaImage BikaImage;

/**
 * A normalized, non-negative square blur kernel.
 */
typedef struct BikaKernel BikaKernel;

/**
 * A trained restoration network.
 */
typedef struct BikaNet BikaNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the last failed call on this thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length
 * without the terminator, or 0 if the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t bika_last_error(char *buf, size_t len);

/**
 * Isotropic Gaussian kernel of odd `size` and standard deviation `sigma`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum BikaStatus bika_kernel_isotropic(size_t size, double sigma, struct BikaKernel **out);

/**
 * Rotated anisotropic Gaussian kernel; `theta` is in radians.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum BikaStatus bika_kernel_anisotropic(size_t size,
                                        double sigma_x,
                                        double sigma_y,
                                        double theta,
                                        struct BikaKernel **out);

/**
 * Identity kernel.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum BikaStatus bika_kernel_delta(size_t size, struct BikaKernel **out);

/**
 * Builds a kernel from `size * size` row-major values, which are
 * normalized to sum to one.
 *
 * # Safety
 * `values` must point to `size * size` readable doubles; `out` must be a
 * valid pointer to a handle slot.
 */
enum BikaStatus bika_kernel_from_values(size_t size, const double *values, struct BikaKernel **out);

/**
 * Reads a kernel file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum BikaStatus bika_kernel_load(const char *path, struct BikaKernel **out);

/**
 * Writes a kernel file.
 *
 * # Safety
 * `kernel` must be a live handle; `path` a NUL-terminated string.
 */
enum BikaStatus bika_kernel_save(const struct BikaKernel *kernel, const char *path);

/**
 * Side length of a kernel, or 0 for a null handle.
 *
 * # Safety
 * `kernel` must be null or a live handle.
 */
size_t bika_kernel_size(const struct BikaKernel *kernel);

/**
 * Copies the `size * size` kernel values into `buf`, which holds `len`
 * doubles.
 *
 * # Safety
 * `kernel` must be a live handle; `buf` must point to `len` writable
 * doubles.
 */
enum BikaStatus bika_kernel_values(const struct BikaKernel *kernel, double *buf, size_t len);

/**
 * # Safety
 * `kernel` must be null or a handle not yet freed.
 */
void bika_kernel_free(struct BikaKernel *kernel);

/**
 * Builds an image from `height * width * channels` interleaved values in
 * [0, 1]; `channels` is 1 or 3.
 *
 * # Safety
 * `data` must point to that many readable doubles; `out` must be a valid
 * handle slot.
 */
enum BikaStatus bika_image_new(size_t height,
                               size_t width,
                               size_t channels,
                               const double *data,
                               struct BikaImage **out);

/**
 * Decodes an image file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum BikaStatus bika_image_load(const char *path, struct BikaImage **out);

/**
 * Writes an 8-bit PNG.
 *
 * # Safety
 * `image` must be a live handle; `path` a NUL-terminated string.
 */
enum BikaStatus bika_image_save_png(const struct BikaImage *image, const char *path);

/**
 * Writes the image's height, width and channel count. Any output pointer
 * may be null.
 *
 * # Safety
 * `image` must be a live handle; non-null outputs must be writable.
 */
enum BikaStatus bika_image_dims(const struct BikaImage *image,
                                size_t *height,
                                size_t *width,
                                size_t *channels);

/**
 * Copies the interleaved pixel values into `buf`, which holds `len`
 * doubles.
 *
 * # Safety
 * `image` must be a live handle; `buf` must point to `len` writable
 * doubles.
 */
enum BikaStatus bika_image_data(const struct BikaImage *image, double *buf, size_t len);

/**
 * # Safety
 * `image` must be null or a handle not yet freed.
 */
void bika_image_free(struct BikaImage *image);

/**
 * Blurs `image` with `kernel`.
 *
 * # Safety
 * `image` and `kernel` must be live handles; `out` a valid handle slot.
 */
enum BikaStatus bika_convolve(const struct BikaImage *image,
                              const struct BikaKernel *kernel,
                              enum BikaBoundary boundary,
                              struct BikaImage **out);

/**
 * Non-blind Wiener restoration with noise-to-signal ratio `nsr`.
 *
 * # Safety
 * `blurred` and `kernel` must be live handles; `out` a valid handle slot.
 */
enum BikaStatus bika_wiener(const struct BikaImage *blurred,
                            const struct BikaKernel *kernel,
                            double nsr,
                            struct BikaImage **out);

/**
 * PSNR in dB for a peak value of 1.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum BikaStatus bika_psnr(const struct BikaImage *a, const struct BikaImage *b, double *out);

/**
 * Mean SSIM for a peak value of 1.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum BikaStatus bika_ssim(const struct BikaImage *a, const struct BikaImage *b, double *out);

/**
 * Estimates the blur kernel of a single image. Passing 0 for
 * `iterations` keeps the default schedule.
 *
 * # Safety
 * `blurred` must be a live handle; `out` a valid handle slot.
 */
enum BikaStatus bika_estimate_kernel(const struct BikaImage *blurred,
                                     size_t iterations,
                                     uint64_t seed,
                                     struct BikaKernel **out);

/**
 * Loads a network checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum BikaStatus bika_net_load(const char *path, struct BikaNet **out);

/**
 * Number of scalar parameters of a network, or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t bika_net_param_count(const struct BikaNet *net);

/**
 * Restores a blurred RGB image given its kernel.
 *
 * # Safety
 * `net`, `blurred` and `kernel` must be live handles; `out` a valid
 * handle slot.
 */
enum BikaStatus bika_net_restore(const struct BikaNet *net,
                                 const struct BikaImage *blurred,
                                 const struct BikaKernel *kernel,
                                 struct BikaImage **out);

/**
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void bika_net_free(struct BikaNet *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIKANET_H */
