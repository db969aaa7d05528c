//! C interface to `bikanet`.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `*_new`/`*_load` function and released by the matching `*_free`. Calls
//! return a [`BikaStatus`]; on failure the message is kept per thread and
//! can be read with [`bika_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bikanet::degradation::{convolve, wiener_deconvolve, Boundary};
use bikanet::estimator::{estimate_kernel, EstimationConfig};
use bikanet::image::{ColorSpace, ImageTensor};
use bikanet::kernel::{delta_kernel, make_anisotropic_gaussian, make_isotropic_gaussian, BlurKernel};
use bikanet::metrics::{psnr, ssim};
use bikanet::net::{load_checkpoint, Bikanet, Mode};
use bikanet::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BikaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SizeMismatch = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    Checkpoint = 7,
    Internal = 8,
}

/// Border handling for [`bika_convolve`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BikaBoundary {
    Replicate = 0,
    Zero = 1,
    Circular = 2,
}

/// A normalized, non-negative square blur kernel.
pub struct BikaKernel(BlurKernel);

/// A floating-point image with values in [0, 1], stored row-major with
/// interleaved channels.
pub struct BikaImage(ImageTensor);

/// A trained restoration network.
pub struct BikaNet(Bikanet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BikaStatus {
    match e {
        Error::InvalidKernelSize(_) | Error::InvalidSigma(_) | Error::InvalidArgument(_) => {
            BikaStatus::InvalidArgument
        }
        Error::SizeMismatch(_) => BikaStatus::SizeMismatch,
        Error::Io { .. } => BikaStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Image(_) => BikaStatus::Format,
        Error::Numerical(_) => BikaStatus::Numerical,
        Error::Checkpoint(_) => BikaStatus::Checkpoint,
        Error::Tensor(_) => BikaStatus::Internal,
    }
}

struct Fail(BikaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BikaStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BikaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BikaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal error: {msg}"));
            BikaStatus::Internal
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BikaStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the message of the last failed call on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length
/// without the terminator, or 0 if the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bika_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Isotropic Gaussian kernel of odd `size` and standard deviation `sigma`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_isotropic(size: usize, sigma: f64, out: *mut *mut BikaKernel) -> BikaStatus {
    guard(|| put(out, BikaKernel(make_isotropic_gaussian(size, sigma)?)))
}

/// Rotated anisotropic Gaussian kernel; `theta` is in radians.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_anisotropic(
    size: usize,
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
    out: *mut *mut BikaKernel,
) -> BikaStatus {
    guard(|| put(out, BikaKernel(make_anisotropic_gaussian(size, sigma_x, sigma_y, theta)?)))
}

/// Identity kernel.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_delta(size: usize, out: *mut *mut BikaKernel) -> BikaStatus {
    guard(|| put(out, BikaKernel(delta_kernel(size)?)))
}

/// Builds a kernel from `size * size` row-major values, which are
/// normalized to sum to one.
///
/// # Safety
/// `values` must point to `size * size` readable doubles; `out` must be a
/// valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_from_values(
    size: usize,
    values: *const f64,
    out: *mut *mut BikaKernel,
) -> BikaStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        let n = size.checked_mul(size).ok_or_else(|| Fail(BikaStatus::InvalidArgument, "size overflows".into()))?;
        let v = std::slice::from_raw_parts(values, n).to_vec();
        put(out, BikaKernel(BlurKernel::from_raw(size, v)?))
    })
}

/// Reads a kernel file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_load(path: *const c_char, out: *mut *mut BikaKernel) -> BikaStatus {
    guard(|| put(out, BikaKernel(BlurKernel::load(path_arg(path)?)?)))
}

/// Writes a kernel file.
///
/// # Safety
/// `kernel` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_save(kernel: *const BikaKernel, path: *const c_char) -> BikaStatus {
    guard(|| Ok(borrow(kernel, "kernel")?.0.save(path_arg(path)?)?))
}

/// Side length of a kernel, or 0 for a null handle.
///
/// # Safety
/// `kernel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_size(kernel: *const BikaKernel) -> usize {
    kernel.as_ref().map_or(0, |k| k.0.size())
}

/// Copies the `size * size` kernel values into `buf`, which holds `len`
/// doubles.
///
/// # Safety
/// `kernel` must be a live handle; `buf` must point to `len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_values(kernel: *const BikaKernel, buf: *mut f64, len: usize) -> BikaStatus {
    guard(|| {
        let k = borrow(kernel, "kernel")?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let v = k.0.values();
        if len < v.len() {
            return Err(Fail(
                BikaStatus::SizeMismatch,
                format!("buffer holds {len} values, kernel has {}", v.len()),
            ));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// # Safety
/// `kernel` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bika_kernel_free(kernel: *mut BikaKernel) {
    release(kernel)
}

/// Builds an image from `height * width * channels` interleaved values in
/// [0, 1]; `channels` is 1 or 3.
///
/// # Safety
/// `data` must point to that many readable doubles; `out` must be a valid
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut BikaImage,
) -> BikaStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let color = match channels {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Rgb,
            c => return Err(Fail(BikaStatus::InvalidArgument, format!("{c} channels (expected 1 or 3)"))),
        };
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Fail(BikaStatus::InvalidArgument, "image size overflows".into()))?;
        let v = std::slice::from_raw_parts(data, n).to_vec();
        put(out, BikaImage(ImageTensor::new(height, width, color, v)?))
    })
}

/// Decodes an image file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_image_load(path: *const c_char, out: *mut *mut BikaImage) -> BikaStatus {
    guard(|| put(out, BikaImage(ImageTensor::load(path_arg(path)?)?)))
}

/// Writes an 8-bit PNG.
///
/// # Safety
/// `image` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bika_image_save_png(image: *const BikaImage, path: *const c_char) -> BikaStatus {
    guard(|| Ok(borrow(image, "image")?.0.save_png(path_arg(path)?)?))
}

/// Writes the image's height, width and channel count. Any output pointer
/// may be null.
///
/// # Safety
/// `image` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bika_image_dims(
    image: *const BikaImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> BikaStatus {
    guard(|| {
        let img = &borrow(image, "image")?.0;
        for (p, v) in [(height, img.height()), (width, img.width()), (channels, img.channels())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the interleaved pixel values into `buf`, which holds `len`
/// doubles.
///
/// # Safety
/// `image` must be a live handle; `buf` must point to `len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn bika_image_data(image: *const BikaImage, buf: *mut f64, len: usize) -> BikaStatus {
    guard(|| {
        let img = borrow(image, "image")?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let v = img.0.data();
        if len < v.len() {
            return Err(Fail(
                BikaStatus::SizeMismatch,
                format!("buffer holds {len} values, image has {}", v.len()),
            ));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bika_image_free(image: *mut BikaImage) {
    release(image)
}

/// Blurs `image` with `kernel`.
///
/// # Safety
/// `image` and `kernel` must be live handles; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_convolve(
    image: *const BikaImage,
    kernel: *const BikaKernel,
    boundary: BikaBoundary,
    out: *mut *mut BikaImage,
) -> BikaStatus {
    guard(|| {
        let b = match boundary {
            BikaBoundary::Replicate => Boundary::Replicate,
            BikaBoundary::Zero => Boundary::Zero,
            BikaBoundary::Circular => Boundary::Circular,
        };
        let r = convolve(&borrow(image, "image")?.0, &borrow(kernel, "kernel")?.0, b)?;
        put(out, BikaImage(r))
    })
}

/// Non-blind Wiener restoration with noise-to-signal ratio `nsr`.
///
/// # Safety
/// `blurred` and `kernel` must be live handles; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_wiener(
    blurred: *const BikaImage,
    kernel: *const BikaKernel,
    nsr: f64,
    out: *mut *mut BikaImage,
) -> BikaStatus {
    guard(|| {
        let r = wiener_deconvolve(&borrow(blurred, "image")?.0, &borrow(kernel, "kernel")?.0, nsr)?;
        put(out, BikaImage(r))
    })
}

/// PSNR in dB for a peak value of 1.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bika_psnr(a: *const BikaImage, b: *const BikaImage, out: *mut f64) -> BikaStatus {
    guard(|| {
        let v = psnr(&borrow(a, "image")?.0, &borrow(b, "image")?.0, 1.0)?;
        *out.as_mut().ok_or_else(|| null("output pointer"))? = v;
        Ok(())
    })
}

/// Mean SSIM for a peak value of 1.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bika_ssim(a: *const BikaImage, b: *const BikaImage, out: *mut f64) -> BikaStatus {
    guard(|| {
        let v = ssim(&borrow(a, "image")?.0, &borrow(b, "image")?.0, 1.0)?;
        *out.as_mut().ok_or_else(|| null("output pointer"))? = v;
        Ok(())
    })
}

/// Estimates the blur kernel of a single image. Passing 0 for
/// `iterations` keeps the default schedule.
///
/// # Safety
/// `blurred` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_estimate_kernel(
    blurred: *const BikaImage,
    iterations: usize,
    seed: u64,
    out: *mut *mut BikaKernel,
) -> BikaStatus {
    guard(|| {
        let mut cfg = EstimationConfig {
            seed,
            ..EstimationConfig::default()
        };
        if iterations > 0 {
            cfg.iterations = iterations;
        }
        let k = estimate_kernel(&borrow(blurred, "image")?.0, &cfg)?;
        put(out, BikaKernel(k))
    })
}

/// Loads a network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_net_load(path: *const c_char, out: *mut *mut BikaNet) -> BikaStatus {
    guard(|| {
        let ck = load_checkpoint(path_arg(path)?, candle_core::DType::F32)?;
        put(out, BikaNet(ck.net))
    })
}

/// Number of scalar parameters of a network, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bika_net_param_count(net: *const BikaNet) -> usize {
    net.as_ref().map_or(0, |n| n.0.param_count())
}

/// Restores a blurred RGB image given its kernel.
///
/// # Safety
/// `net`, `blurred` and `kernel` must be live handles; `out` a valid
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn bika_net_restore(
    net: *const BikaNet,
    blurred: *const BikaImage,
    kernel: *const BikaKernel,
    out: *mut *mut BikaImage,
) -> BikaStatus {
    guard(|| {
        let net = &borrow(net, "network")?.0;
        if net.config().mode != Mode::KernelAdain {
            return Err(Fail(
                BikaStatus::InvalidArgument,
                "this checkpoint is conditioned on motion flow, not kernels".into(),
            ));
        }
        let r = net.forward(&borrow(blurred, "image")?.0, &borrow(kernel, "kernel")?.0)?;
        put(out, BikaImage(r))
    })
}

/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bika_net_free(net: *mut BikaNet) {
    release(net)
}
