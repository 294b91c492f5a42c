// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the embedding store, centroid neutraliser and trained probes.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free`. Every function returns a [`TpStatus`]; on failure the
//! message is available from [`tp_last_error_message`] on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::CStr;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use typoprobe::corpus::LanguageId;
use typoprobe::embedding::{read_embeddings, write_embeddings, Dtype, EmbeddingHeader, EmbeddingMatrix};
use typoprobe::neutralise::{compute_centroid, cross_neutralise, self_neutralise, LanguageCentroid};
use typoprobe::probe::{accuracy_of, predict, TrainedProbe};
use typoprobe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    Missing = 6,
    Numerical = 7,
    Validation = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

pub struct TpEmbeddings(EmbeddingMatrix);
pub struct TpCentroid(LanguageCentroid);
pub struct TpProbe(TrainedProbe);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TpStatus {
    match e {
        Error::Io { .. } => TpStatus::Io,
        Error::Format { .. } | Error::Decode(_) | Error::Parse { .. } | Error::Json(_) => TpStatus::Format,
        Error::DimensionMismatch { .. } => TpStatus::DimensionMismatch,
        Error::Missing(_) => TpStatus::Missing,
        Error::Numerical(_) => TpStatus::Numerical,
        Error::Validation(_) => TpStatus::Validation,
    }
}

struct Fail(TpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TpStatus::Panic
        }
    }
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(TpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(TpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(TpStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TpStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Reads an embedding file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_embeddings_read(path: *const c_char, out: *mut *mut TpEmbeddings) -> TpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = read_embeddings(Path::new(string(path, "path")?))?;
        *out = boxed(TpEmbeddings(m));
        Ok(())
    })
}

/// Writes `h` to `path`. Refuses matrices holding NaN or infinity.
///
/// # Safety
/// `h` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tp_embeddings_write(h: *const TpEmbeddings, path: *const c_char) -> TpStatus {
    guard(|| {
        let h = arg(h, "embeddings")?;
        write_embeddings(&h.0, Path::new(string(path, "path")?))?;
        Ok(())
    })
}

/// Builds a matrix from `count * dim` row-major values. `dtype` is 0 for
/// f32 storage and 1 for f64.
///
/// # Safety
/// `language` and `encoder` must be NUL-terminated strings, `data` must
/// point to `count * dim` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_embeddings_from_rows(
    language: *const c_char,
    encoder: *const c_char,
    layer: u16,
    dtype: u8,
    data: *const f64,
    count: usize,
    dim: usize,
    out: *mut *mut TpEmbeddings,
) -> TpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let language = LanguageId::new(string(language, "language")?)?;
        let encoder = string(encoder, "encoder")?;
        let dtype = match dtype {
            0 => Dtype::F32,
            1 => Dtype::F64,
            d => return Err(Fail(TpStatus::InvalidArgument, format!("unknown dtype {d}"))),
        };
        let len = count
            .checked_mul(dim)
            .ok_or_else(|| Fail(TpStatus::InvalidArgument, "count * dim overflows".into()))?;
        if data.is_null() {
            return Err(Fail(TpStatus::NullPointer, "data is null".into()));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let mut header = EmbeddingHeader::new(language, encoder, layer, dim, count, dtype);
        header.encoder_depth = header.encoder_depth.max(layer);
        let m = EmbeddingMatrix::new(header, values)?;
        m.check_finite().map_err(Error::from)?;
        *out = boxed(TpEmbeddings(m));
        Ok(())
    })
}

/// # Safety
/// `h` must come from this library; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_embeddings_count(h: *const TpEmbeddings, count: *mut usize) -> TpStatus {
    guard(|| {
        *out_ptr(count, "count")? = arg(h, "embeddings")?.0.count();
        Ok(())
    })
}

/// # Safety
/// `h` must come from this library; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_embeddings_dim(h: *const TpEmbeddings, dim: *mut usize) -> TpStatus {
    guard(|| {
        *out_ptr(dim, "dim")? = arg(h, "embeddings")?.0.dim();
        Ok(())
    })
}

fn copy_into(src: &[f64], buf: *mut f64, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(Fail(TpStatus::NullPointer, "buffer is null".into()));
    }
    if len < src.len() {
        return Err(Fail(
            TpStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    // SAFETY: the caller guarantees `len` writable doubles at `buf`.
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len()) };
    Ok(())
}

/// Copies the row-major values of `h` into `buf`, which must hold
/// `count * dim` doubles.
///
/// # Safety
/// `h` must come from this library; `buf` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tp_embeddings_copy_data(h: *const TpEmbeddings, buf: *mut f64, len: usize) -> TpStatus {
    guard(|| copy_into(arg(h, "embeddings")?.0.data(), buf, len))
}

/// # Safety
/// `h` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_embeddings_free(h: *mut TpEmbeddings) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_centroid_compute(h: *const TpEmbeddings, out: *mut *mut TpCentroid) -> TpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(TpCentroid(compute_centroid(&arg(h, "embeddings")?.0)?));
        Ok(())
    })
}

/// # Safety
/// `c` must come from this library; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_centroid_dim(c: *const TpCentroid, dim: *mut usize) -> TpStatus {
    guard(|| {
        *out_ptr(dim, "dim")? = arg(c, "centroid")?.0.dim();
        Ok(())
    })
}

/// # Safety
/// `c` must come from this library; `buf` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tp_centroid_copy(c: *const TpCentroid, buf: *mut f64, len: usize) -> TpStatus {
    guard(|| copy_into(&arg(c, "centroid")?.0.vector, buf, len))
}

/// # Safety
/// `c` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_centroid_free(c: *mut TpCentroid) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Subtracts `h`'s own centroid from every row.
///
/// # Safety
/// `h` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_self_neutralise(h: *const TpEmbeddings, out: *mut *mut TpEmbeddings) -> TpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(TpEmbeddings(self_neutralise(&arg(h, "embeddings")?.0)?));
        Ok(())
    })
}

/// Subtracts centroid `c` (usually another language's) from every row.
///
/// # Safety
/// `h` and `c` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_cross_neutralise(
    h: *const TpEmbeddings,
    c: *const TpCentroid,
    out: *mut *mut TpEmbeddings,
) -> TpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let v = cross_neutralise(&arg(h, "embeddings")?.0, &arg(c, "centroid")?.0)?;
        *out = boxed(TpEmbeddings(v));
        Ok(())
    })
}

/// Loads a probe directory written by a run (`probes/<task>`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_probe_load(dir: *const c_char, out: *mut *mut TpProbe) -> TpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(TpProbe(TrainedProbe::load(Path::new(string(dir, "dir")?))?));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library; `k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_probe_num_classes(p: *const TpProbe, k: *mut usize) -> TpStatus {
    guard(|| {
        *out_ptr(k, "k")? = arg(p, "probe")?.0.num_classes();
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_probe_dim(p: *const TpProbe, dim: *mut usize) -> TpStatus {
    guard(|| {
        *out_ptr(dim, "dim")? = arg(p, "probe")?.0.dim();
        Ok(())
    })
}

/// Writes one predicted class index per row of `h` into `labels`.
///
/// # Safety
/// `p` and `h` must come from this library; `labels` must point to `len`
/// writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn tp_probe_predict(
    p: *const TpProbe,
    h: *const TpEmbeddings,
    labels: *mut usize,
    len: usize,
) -> TpStatus {
    guard(|| {
        let h = arg(h, "embeddings")?;
        if labels.is_null() {
            return Err(Fail(TpStatus::NullPointer, "labels is null".into()));
        }
        if len < h.0.count() {
            return Err(Fail(
                TpStatus::BufferTooSmall,
                format!("buffer holds {len} labels, {} needed", h.0.count()),
            ));
        }
        let pred = predict(&arg(p, "probe")?.0, &h.0)?;
        ptr::copy_nonoverlapping(pred.as_ptr(), labels, pred.len());
        Ok(())
    })
}

/// Fraction of rows of `h` predicted as class `gold`.
///
/// # Safety
/// `p` and `h` must come from this library; `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_probe_accuracy(
    p: *const TpProbe,
    h: *const TpEmbeddings,
    gold: usize,
    accuracy: *mut f64,
) -> TpStatus {
    guard(|| {
        let out = out_ptr(accuracy, "accuracy")?;
        let probe = &arg(p, "probe")?.0;
        if gold >= probe.num_classes() {
            return Err(Fail(
                TpStatus::InvalidArgument,
                format!("gold class {gold} out of range for {} classes", probe.num_classes()),
            ));
        }
        *out = accuracy_of(&predict(probe, &arg(h, "embeddings")?.0)?, gold);
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_probe_free(p: *mut TpProbe) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
