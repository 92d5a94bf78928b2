//! C ABI over the masking, reuse, metric and inference paths.
//!
//! Every fallible call returns a [`MakStatus`]; on failure the message is
//! available from [`mak_last_error`] on the same thread until the next
//! failing call. Objects are opaque handles released by their `*_free`
//! function. Images are channel-major `float` planes with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use maskanynet::error::Error;
use maskanynet::image::Image;
use maskanynet::masking::{apply_mask, MaskPolicy, MaskSpec, Strategy};
use maskanynet::metrics;
use maskanynet::model::{MaskAnyNet, Mode};
use maskanynet::reuse::{build_reuse, scatter_back, ReuseImage};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MakStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    UnsupportedRatio = 4,
    Config = 5,
    Consistency = 6,
    Io = 7,
    Runtime = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

pub struct MakImage(Image);
pub struct MakMask(MaskSpec);
pub struct MakReuse(ReuseImage);
pub struct MakModel(MaskAnyNet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MakStatus {
    match e {
        Error::Dimension(_) | Error::Shape(_) => MakStatus::Dimension,
        Error::UnsupportedRatio { .. } => MakStatus::UnsupportedRatio,
        Error::Range(_) | Error::Domain(_) | Error::EmptyMask | Error::UndefinedSimilarity(_) => {
            MakStatus::InvalidArgument
        }
        Error::Config(_) | Error::Parse(_) => MakStatus::Config,
        Error::Consistency(_) => MakStatus::Consistency,
        Error::Io { .. } | Error::Image(_) | Error::Dataset { .. } => MakStatus::Io,
        _ => MakStatus::Runtime,
    }
}

struct Fail(MakStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MakStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MakStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MakStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            MakStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn text(ptr: *const c_char, what: &str) -> Result<String, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(MakStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_scalar<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = value;
    Ok(())
}

/// Message of the last failing call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mak_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn mak_status_name(status: MakStatus) -> *const c_char {
    let name: &'static CStr = match status {
        MakStatus::Ok => c"ok",
        MakStatus::NullPointer => c"null pointer",
        MakStatus::InvalidArgument => c"invalid argument",
        MakStatus::Dimension => c"dimension mismatch",
        MakStatus::UnsupportedRatio => c"unsupported ratio",
        MakStatus::Config => c"configuration error",
        MakStatus::Consistency => c"consistency error",
        MakStatus::Io => c"i/o error",
        MakStatus::Runtime => c"runtime error",
        MakStatus::BufferTooSmall => c"buffer too small",
        MakStatus::Panic => c"internal panic",
    };
    name.as_ptr()
}

/// Library version string.
#[no_mangle]
pub extern "C" fn mak_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `channels * height * width` floats into a new image.
///
/// # Safety
/// `data` must point to that many readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_image_new(
    channels: usize,
    height: usize,
    width: usize,
    data: *const f32,
    out: *mut *mut MakImage,
) -> MakStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Fail(MakStatus::InvalidArgument, "image size overflows".into()))?;
        let pixels = std::slice::from_raw_parts(data, n).to_vec();
        put(out, MakImage(Image::new(channels, height, width, pixels)?))
    })
}

/// Decodes an image file (PNG) into `[0, 1]` RGB planes.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_image_load(path: *const c_char, out: *mut *mut MakImage) -> MakStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        put(out, MakImage(Image::load(&path)?))
    })
}

/// # Safety
/// `image` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mak_image_free(image: *mut MakImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// # Safety
/// `image` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_image_dims(
    image: *const MakImage,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> MakStatus {
    guard(|| {
        let img = &borrow(image, "image")?.0;
        write_scalar(channels, img.channels())?;
        write_scalar(height, img.height())?;
        write_scalar(width, img.width())
    })
}

/// Copies the pixels into `dst`, which holds `capacity` floats.
///
/// # Safety
/// `image` must be a live handle; `dst` must hold `capacity` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mak_image_read(
    image: *const MakImage,
    dst: *mut f32,
    capacity: usize,
) -> MakStatus {
    guard(|| {
        let data = borrow(image, "image")?.0.data();
        if dst.is_null() {
            return Err(null("dst"));
        }
        if capacity < data.len() {
            return Err(Fail(
                MakStatus::BufferTooSmall,
                format!("need {} floats, got {capacity}", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), dst, data.len());
        Ok(())
    })
}

/// Writes the image as an 8-bit PNG.
///
/// # Safety
/// `image` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mak_image_save_png(image: *const MakImage, path: *const c_char) -> MakStatus {
    guard(|| {
        let img = &borrow(image, "image")?.0;
        img.save_png(PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Generates a mask for a `height x width` image. `strategy` is one of
/// `patch`, `grid`, `random`, `combined`, `patch+grid+random`;
/// `block_size == 0` selects the default for the image size.
///
/// # Safety
/// `strategy` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_mask_generate(
    strategy: *const c_char,
    ratio: f64,
    block_size: usize,
    height: usize,
    width: usize,
    seed: u64,
    out: *mut *mut MakMask,
) -> MakStatus {
    guard(|| {
        let strategy: Strategy = text(strategy, "strategy")?.parse()?;
        let policy = MaskPolicy {
            block_size: (block_size > 0).then_some(block_size),
            ..MaskPolicy::new(strategy, ratio)
        };
        put(out, MakMask(policy.generate((height, width), seed)?))
    })
}

/// # Safety
/// `mask` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mak_mask_free(mask: *mut MakMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Masked and total cell counts and the masked pixel fraction.
///
/// # Safety
/// `mask` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_mask_stats(
    mask: *const MakMask,
    masked_cells: *mut usize,
    cells: *mut usize,
    coverage: *mut f64,
) -> MakStatus {
    guard(|| {
        let m = &borrow(mask, "mask")?.0;
        write_scalar(masked_cells, m.masked_count())?;
        write_scalar(cells, m.cell_count())?;
        write_scalar(coverage, m.coverage())
    })
}

/// Copy of `image` with masked pixels set to `fill`.
///
/// # Safety
/// `image` and `mask` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_apply_mask(
    image: *const MakImage,
    mask: *const MakMask,
    fill: f32,
    out: *mut *mut MakImage,
) -> MakStatus {
    guard(|| {
        let masked = apply_mask(&borrow(image, "image")?.0, &borrow(mask, "mask")?.0, fill)?;
        put(out, MakImage(masked.pixels))
    })
}

/// Stitches the masked regions of `image` into a reuse image.
///
/// # Safety
/// `image` and `mask` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_reuse_build(
    image: *const MakImage,
    mask: *const MakMask,
    out: *mut *mut MakReuse,
) -> MakStatus {
    guard(|| {
        let reuse = build_reuse(&borrow(image, "image")?.0, &borrow(mask, "mask")?.0)?;
        put(out, MakReuse(reuse))
    })
}

/// # Safety
/// `reuse` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mak_reuse_free(reuse: *mut MakReuse) {
    if !reuse.is_null() {
        drop(Box::from_raw(reuse));
    }
}

/// The stitched canvas as a new image.
///
/// # Safety
/// `reuse` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_reuse_pixels(reuse: *const MakReuse, out: *mut *mut MakImage) -> MakStatus {
    guard(|| {
        let pixels = borrow(reuse, "reuse")?.0.pixels.clone();
        put(out, MakImage(pixels))
    })
}

/// Writes the reuse patches back into a copy of `canvas` at their source
/// positions.
///
/// # Safety
/// All handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_reuse_scatter_back(
    reuse: *const MakReuse,
    mask: *const MakMask,
    canvas: *const MakImage,
    out: *mut *mut MakImage,
) -> MakStatus {
    guard(|| {
        let restored = scatter_back(
            &borrow(reuse, "reuse")?.0,
            &borrow(mask, "mask")?.0,
            &borrow(canvas, "canvas")?.0,
        )?;
        put(out, MakImage(restored))
    })
}

/// Shannon entropy in bits of the image's 8-bit intensity histogram.
///
/// # Safety
/// `image` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_shannon_entropy(image: *const MakImage, out: *mut f64) -> MakStatus {
    guard(|| write_scalar(out, metrics::shannon_entropy(&borrow(image, "image")?.0)?))
}

/// Cosine similarity of two feature vectors of length `len`.
///
/// # Safety
/// `a` and `b` must each hold `len` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_cosine_similarity(
    a: *const f32,
    b: *const f32,
    len: usize,
    out: *mut f64,
) -> MakStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("feature vector"));
        }
        let (a, b) = (
            std::slice::from_raw_parts(a, len),
            std::slice::from_raw_parts(b, len),
        );
        write_scalar(out, metrics::cosine_similarity(a, b)?)
    })
}

/// Anchored similarity score `exp(-|s_ds - s_a|)`.
#[no_mangle]
pub extern "C" fn mak_similarity_score(s_ds: f64, s_a: f64) -> f64 {
    metrics::similarity_score(s_ds, s_a)
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_model_load(dir: *const c_char, out: *mut *mut MakModel) -> MakStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        put(out, MakModel(MaskAnyNet::load(&dir)?))
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mak_model_free(model: *mut MakModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mak_model_num_classes(model: *const MakModel, out: *mut usize) -> MakStatus {
    guard(|| write_scalar(out, borrow(model, "model")?.0.config().num_classes))
}

/// Eval-mode logits of one image, written to `logits` (`capacity` floats).
///
/// # Safety
/// `model` and `image` must be live handles; `logits` must hold `capacity`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn mak_model_predict(
    model: *const MakModel,
    image: *const MakImage,
    logits: *mut f32,
    capacity: usize,
) -> MakStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let image = &borrow(image, "image")?.0;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let classes = model.config().num_classes;
        if capacity < classes {
            return Err(Fail(
                MakStatus::BufferTooSmall,
                format!("need {classes} floats, got {capacity}"),
            ));
        }
        let out = model
            .forward(std::slice::from_ref(image), Mode::Eval, 0)?
            .get(0)
            .and_then(|t| t.to_dtype(candle_core::DType::F32))
            .and_then(|t| t.to_vec1::<f32>())
            .map_err(Error::from)?;
        std::ptr::copy_nonoverlapping(out.as_ptr(), logits, classes);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn image(c: usize, h: usize, w: usize) -> *mut MakImage {
        let data: Vec<f32> = (0..c * h * w).map(|i| (i % 251) as f32 / 250.0).collect();
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { mak_image_new(c, h, w, data.as_ptr(), &mut out) }, MakStatus::Ok);
        out
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(mak_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn round_trip_through_handles() {
        unsafe {
            let img = image(3, 32, 32);
            let mut mask = ptr::null_mut();
            assert_eq!(
                mak_mask_generate(c"patch".as_ptr(), 0.25, 8, 32, 32, 3, &mut mask),
                MakStatus::Ok
            );
            let (mut masked_cells, mut cells, mut coverage) = (0, 0, 0.0);
            assert_eq!(mak_mask_stats(mask, &mut masked_cells, &mut cells, &mut coverage), MakStatus::Ok);
            assert_eq!((masked_cells, cells), (4, 16));
            assert_eq!(coverage, 0.25);

            let (mut masked, mut reuse, mut restored) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
            assert_eq!(mak_apply_mask(img, mask, 0.0, &mut masked), MakStatus::Ok);
            assert_eq!(mak_reuse_build(img, mask, &mut reuse), MakStatus::Ok);
            assert_eq!(mak_reuse_scatter_back(reuse, mask, masked, &mut restored), MakStatus::Ok);
            assert_eq!((*restored).0, (*img).0);

            let mut h = 0.0;
            assert_eq!(mak_shannon_entropy(img, &mut h), MakStatus::Ok);
            assert!(h > 0.0);

            for p in [img, masked, restored] {
                mak_image_free(p);
            }
            mak_reuse_free(reuse);
            mak_mask_free(mask);
        }
    }

    #[test]
    fn errors_set_status_and_message() {
        unsafe {
            let mut mask = ptr::null_mut();
            let s = mak_mask_generate(c"grid".as_ptr(), 0.3, 8, 32, 32, 0, &mut mask);
            assert_eq!(s, MakStatus::UnsupportedRatio);
            assert!(mask.is_null());
            assert!(last_error().contains("0.3"));

            let s = mak_mask_generate(c"zigzag".as_ptr(), 0.25, 8, 32, 32, 0, &mut mask);
            assert_eq!(s, MakStatus::Config);

            assert_eq!(mak_image_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), MakStatus::NullPointer);

            let img = image(1, 4, 4);
            let mut small = [0f32; 3];
            assert_eq!(mak_image_read(img, small.as_mut_ptr(), 3), MakStatus::BufferTooSmall);
            let mut model = ptr::null_mut();
            assert_eq!(mak_model_load(c"/nonexistent/ckpt".as_ptr(), &mut model), MakStatus::Io);
            mak_image_free(img);
            mak_image_free(ptr::null_mut());
        }
    }

    #[test]
    fn metric_entry_points() {
        assert!((mak_similarity_score(1.0, 0.5) - (-0.5f64).exp()).abs() < 1e-12);
        let a = [1.0f32, 0.0];
        let b = [1.0f32, 1.0];
        let mut out = 0.0;
        assert_eq!(
            unsafe { mak_cosine_similarity(a.as_ptr(), b.as_ptr(), 2, &mut out) },
            MakStatus::Ok
        );
        assert!((out - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert_eq!(
            unsafe { CStr::from_ptr(mak_status_name(MakStatus::Io)) }.to_str().unwrap(),
            "i/o error"
        );
    }
}
