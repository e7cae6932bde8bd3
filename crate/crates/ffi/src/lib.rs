//! C ABI for the tracklabel engine.
//!
//! Handles are opaque pointers released with their `_free` function. Every
//! fallible call returns a [`TlStatus`]; on failure the message is kept per
//! thread and can be copied out with [`tl_last_error`]. Strings are
//! NUL-terminated UTF-8. Buffer-filling calls take a capacity and report the
//! required size, including the terminator, through `needed`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tracklabel::association::{associate_greedy, import_tracks, AssocParams};
use tracklabel::consensus::{propagate, run_consensus, ConsensusRecord, SynonymClustering};
use tracklabel::data::{load_dataset, SceneDataset};
use tracklabel::field::contrastive_loss_indexed;
use tracklabel::keyframe::visibility_score;
use tracklabel::mask::RleMask;
use tracklabel::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    InvalidParameter = 6,
    Numeric = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for TlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => TlStatus::Io,
            Error::DimensionMismatch(_) => TlStatus::Dimension,
            Error::InvalidParameter(_) | Error::EmptyPositives | Error::PositiveNotInPool(_) => {
                TlStatus::InvalidParameter
            }
            Error::Numeric(_) => TlStatus::Numeric,
            Error::Stage { source, .. } => TlStatus::from(source.as_ref()),
            _ => TlStatus::Format,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: TlStatus, msg: impl Into<String>) -> TlStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), (TlStatus, String)>) -> TlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TlStatus::Ok
        }
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(TlStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> (TlStatus, String) {
    (TlStatus::from(&e), e.to_string())
}

fn null(name: &str) -> (TlStatus, String) {
    (TlStatus::NullPointer, format!("{name} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (TlStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), (TlStatus, String)> {
    let bytes = s.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || cap == 0 {
        return if cap == 0 {
            Err((TlStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1)))
        } else {
            Err(null("buf"))
        };
    }
    if cap < bytes.len() + 1 {
        return Err((
            TlStatus::BufferTooSmall,
            format!("need {} bytes, got {cap}", bytes.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`. Returns the
/// message length without the terminator; the copy is truncated to fit.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// A loaded dataset.
pub struct TlDataset {
    inner: SceneDataset,
}

/// Consensus output over a dataset.
pub struct TlConsensus {
    clustering: SynonymClustering,
    records: Vec<ConsensusRecord>,
    resolved: SceneDataset,
}

/// Loads a dataset manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_dataset_load(path: *const c_char, out: *mut *mut TlDataset) -> TlStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| (TlStatus::InvalidUtf8, e.to_string()))?;
        let ds = load_dataset(Path::new(p)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(TlDataset { inner: ds }));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from [`tl_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_dataset_free(ds: *mut TlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of detections; 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_dataset_detection_count(ds: *const TlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.detections.len())
}

/// Number of views; 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_dataset_view_count(ds: *const TlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n_views)
}

/// Runs association and consensus. Track ids are imported when every
/// detection carries one; otherwise detections are associated greedily with
/// default parameters.
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_consensus_run(ds: *const TlDataset, tau_sem: f64, out: *mut *mut TlConsensus) -> TlStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let tracks = if ds.detections.iter().all(|d| d.track.is_some()) {
            import_tracks(ds)
        } else {
            associate_greedy(ds, &AssocParams::default())
        }
        .map_err(lib_err)?;
        let (clustering, records) = run_consensus(ds, &tracks, tau_sem).map_err(lib_err)?;
        let resolved = propagate(ds, &records);
        *out = Box::into_raw(Box::new(TlConsensus {
            clustering,
            records,
            resolved,
        }));
        Ok(())
    })
}

/// Releases consensus output. Null is ignored.
///
/// # Safety
/// `c` must come from [`tl_consensus_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_consensus_free(c: *mut TlConsensus) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Number of trajectories; 0 for null.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_consensus_track_count(c: *const TlConsensus) -> usize {
    c.as_ref().map_or(0, |c| c.records.len())
}

/// Number of synonym clusters; 0 for null.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_consensus_cluster_count(c: *const TlConsensus) -> usize {
    c.as_ref().map_or(0, |c| c.clustering.cluster_count())
}

/// Track id and canonical label of the `index`-th trajectory.
///
/// # Safety
/// `c` must be a live handle, `track` writable, `buf` null or `cap` writable
/// bytes, `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn tl_consensus_track(
    c: *const TlConsensus,
    index: usize,
    track: *mut u64,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> TlStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("c"))?;
        let r = c.records.get(index).ok_or_else(|| {
            (
                TlStatus::OutOfRange,
                format!("track index {index} of {}", c.records.len()),
            )
        })?;
        if !track.is_null() {
            *track = r.track;
        }
        write_str(&r.canonical, buf, cap, needed)
    })
}

/// Resolved label of detection `index`.
///
/// # Safety
/// As for [`tl_consensus_track`].
#[no_mangle]
pub unsafe extern "C" fn tl_consensus_resolved_label(
    c: *const TlConsensus,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> TlStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("c"))?;
        let d = c.resolved.detections.get(index).ok_or_else(|| {
            (
                TlStatus::OutOfRange,
                format!("detection index {index} of {}", c.resolved.detections.len()),
            )
        })?;
        write_str(d.resolved.as_deref().unwrap_or(&d.label), buf, cap, needed)
    })
}

/// IoU of two run-length masks of the same size.
///
/// # Safety
/// `a` and `b` must point to `a_len` and `b_len` run lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tl_mask_iou(
    h: u32,
    w: u32,
    a: *const u32,
    a_len: usize,
    b: *const u32,
    b_len: usize,
    out: *mut f64,
) -> TlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ma = RleMask::new(h, w, slice(a, a_len, "a")?.to_vec()).map_err(lib_err)?;
        let mb = RleMask::new(h, w, slice(b, b_len, "b")?.to_vec()).map_err(lib_err)?;
        *out = ma.iou(&mb).map_err(lib_err)?;
        Ok(())
    })
}

/// Visibility score `A * exp(-(sqrt(A) - sqrt(A_med))^2 / (2 sigma^2))`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_visibility_score(area: f64, median_area: f64, sigma: f64, out: *mut f64) -> TlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = visibility_score(area, median_area, sigma).map_err(lib_err)?;
        Ok(())
    })
}

/// Multi-positive contrastive loss. `pool` is `pool_len` row-major vectors of
/// length `dim`; `positives` indexes into it. `grad` may be null, otherwise it
/// receives `dim` values.
///
/// # Safety
/// All pointers must cover the stated lengths; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_contrastive_loss(
    f_g: *const f64,
    dim: usize,
    pool: *const f64,
    pool_len: usize,
    positives: *const usize,
    n_positives: usize,
    tau: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> TlStatus {
    guard(|| {
        if loss.is_null() {
            return Err(null("loss"));
        }
        if dim == 0 {
            return Err((TlStatus::Dimension, "dim must be positive".to_string()));
        }
        let f = slice(f_g, dim, "f_g")?;
        let flat = slice(pool, pool_len * dim, "pool")?;
        let rows: Vec<&[f64]> = flat.chunks(dim).collect();
        let pos = slice(positives, n_positives, "positives")?;
        let (l, g) = contrastive_loss_indexed(f, &rows, pos, tau).map_err(lib_err)?;
        *loss = l;
        if !grad.is_null() {
            ptr::copy_nonoverlapping(g.as_ptr(), grad, dim);
        }
        Ok(())
    })
}
