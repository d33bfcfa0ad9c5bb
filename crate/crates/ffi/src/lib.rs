//! C ABI over the twinbeam library.
//!
//! Objects are opaque handles created by `tb_*` constructors and released by
//! the matching `tb_*_free`. Every fallible call returns a [`TbStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`tb_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use twinbeam::detection::{self, DetectorSpec};
use twinbeam::error::Category;
use twinbeam::ingest::{self, GroupingPolicy};
use twinbeam::metrology;
use twinbeam::model::{self, JointDist, TwbParams};
use twinbeam::moments::{self, Nci};
use twinbeam::reconstruct::{self, EmConfig};
use twinbeam::simulate::{self, ClickStream, PumpCorrelation};
use twinbeam::{formats, Error};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Beam parameters: mode counts and per-mode means of pairs, signal noise, idler noise.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TbTwbParams {
    pub m_p: f64,
    pub m_s: f64,
    pub m_i: f64,
    pub b_p: f64,
    pub b_s: f64,
    pub b_i: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TbDetector {
    pub eta: f64,
    pub dark: f64,
    pub pixels: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TbStats {
    pub mean_s: f64,
    pub mean_i: f64,
    pub fano_s: f64,
    pub fano_i: f64,
    pub nrp: f64,
    pub correlation: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TbEmReport {
    pub iterations: usize,
    pub converged: bool,
    pub max_change: f64,
    pub loglik: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TbPrecision {
    pub s_cs: f64,
    pub s_ci: f64,
    pub reference_s: f64,
    pub reference_i: f64,
    pub conditioned_s: f64,
    pub conditioned_i: f64,
    pub n_blocks: usize,
    pub partial_coverage: bool,
}

/// Joint photon-number or photocount distribution.
pub struct TbJointDist(JointDist);

/// Click stream of detection windows.
pub struct TbStream(ClickStream);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> TbStatus {
    match e.category() {
        Category::Usage => TbStatus::InvalidArgument,
        Category::Data => TbStatus::DataError,
        Category::Numeric => TbStatus::NumericError,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Small(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TbStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            TbStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            TbStatus::InvalidArgument
        }
        Ok(Err(Fail::Small(msg))) => {
            set_error(msg);
            TbStatus::BufferTooSmall
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TbStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

fn params(p: &TbTwbParams) -> TwbParams {
    TwbParams::new(p.m_p, p.m_s, p.m_i, p.b_p, p.b_s, p.b_i)
}

fn spec(d: &TbDetector) -> DetectorSpec {
    DetectorSpec::new(d.eta, d.dark, d.pixels)
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Copies the last error message of this thread into `buf` as a NUL-terminated
/// string and returns the length without the terminator. Nothing is written
/// when `buf` is null or `len` is too small; the return value is then the size needed.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let n = e.len();
        if !buf.is_null() && len > n {
            ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        n
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Preset constituting beam and detectors of the reference experiment.
///
/// # Safety
/// Each pointer must be null or valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_presets(params: *mut TbTwbParams, signal: *mut TbDetector, idler: *mut TbDetector) {
    let w = twinbeam::presets::window_params();
    let d = |s: DetectorSpec| TbDetector { eta: s.eta, dark: s.dark, pixels: s.pixels };
    if let Some(p) = params.as_mut() {
        *p = TbTwbParams { m_p: w.m_p, m_s: w.m_s, m_i: w.m_i, b_p: w.b_p, b_s: w.b_s, b_i: w.b_i };
    }
    if let Some(s) = signal.as_mut() {
        *s = d(twinbeam::presets::signal_apd());
    }
    if let Some(i) = idler.as_mut() {
        *i = d(twinbeam::presets::idler_apd());
    }
}

/// Joint photon-number distribution of a twin beam. Zero limits pick the support automatically.
///
/// # Safety
/// `p` must point to valid parameters and `result` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_joint_twb(
    p: *const TbTwbParams,
    n_s_max: usize,
    n_i_max: usize,
    result: *mut *mut TbJointDist,
) -> TbStatus {
    guard(|| {
        let p = params(deref(p, "params")?);
        let r = out(result, "result")?;
        let d = if n_s_max == 0 && n_i_max == 0 {
            model::joint_twb_auto(&p)?
        } else {
            model::joint_twb(&p, n_s_max, n_i_max)?
        };
        *r = boxed(TbJointDist(d));
        Ok(())
    })
}

/// Photocount distribution of `photons` seen by two detectors.
///
/// # Safety
/// All pointers must be valid; `photons` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_forward_photocounts(
    photons: *const TbJointDist,
    signal: *const TbDetector,
    idler: *const TbDetector,
    result: *mut *mut TbJointDist,
) -> TbStatus {
    guard(|| {
        let d = &deref(photons, "photons")?.0;
        let (s, i) = (spec(deref(signal, "signal")?), spec(deref(idler, "idler")?));
        let r = out(result, "result")?;
        *r = boxed(TbJointDist(detection::forward_photocounts(d, &s, &i)?));
        Ok(())
    })
}

/// Photocount distribution of `n` grouped windows of single-pixel detectors.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tb_compound_photocounts(
    p: *const TbTwbParams,
    signal: *const TbDetector,
    idler: *const TbDetector,
    n: usize,
    result: *mut *mut TbJointDist,
) -> TbStatus {
    guard(|| {
        let p = params(deref(p, "params")?);
        let (s, i) = (spec(deref(signal, "signal")?), spec(deref(idler, "idler")?));
        let r = out(result, "result")?;
        let f = detection::constituting_photocounts(&p, &s, &i)?;
        *r = boxed(TbJointDist(detection::compound_photocounts(&f, n)?));
        Ok(())
    })
}

/// # Safety
/// `d` must be a live handle; `rows` and `cols` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_dist_shape(d: *const TbJointDist, rows: *mut usize, cols: *mut usize) -> TbStatus {
    guard(|| {
        let d = &deref(d, "dist")?.0;
        *out(rows, "rows")? = d.rows();
        *out(cols, "cols")? = d.cols();
        Ok(())
    })
}

/// Probability of (n_s, n_i); zero outside the stored support.
///
/// # Safety
/// `d` must be a live handle; `value` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_dist_get(d: *const TbJointDist, n_s: usize, n_i: usize, value: *mut f64) -> TbStatus {
    guard(|| {
        let d = &deref(d, "dist")?.0;
        *out(value, "value")? = d.get(n_s, n_i);
        Ok(())
    })
}

/// Copies the row-major table into `buf` of `len` doubles.
///
/// # Safety
/// `d` must be a live handle; `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tb_dist_copy(d: *const TbJointDist, buf: *mut f64, len: usize) -> TbStatus {
    guard(|| {
        let d = &deref(d, "dist")?.0;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let t = d.table();
        if len < t.len() {
            return Err(Fail::Small(format!("buffer holds {len}, table has {}", t.len())));
        }
        ptr::copy_nonoverlapping(t.as_ptr(), buf, t.len());
        Ok(())
    })
}

/// Fano factors, noise-reduction parameter and correlation of a distribution.
///
/// # Safety
/// `d` must be a live handle; `stats` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_dist_stats(d: *const TbJointDist, stats: *mut TbStats) -> TbStatus {
    guard(|| {
        let d = &deref(d, "dist")?.0;
        let m = moments::moments(d, 2)?;
        let f = moments::fano_nrp_cov(&m)?;
        *out(stats, "stats")? = TbStats {
            mean_s: m.get(1, 0),
            mean_i: m.get(0, 1),
            fano_s: f.f_s,
            fano_i: f.f_i,
            nrp: f.r,
            correlation: f.c,
        };
        Ok(())
    })
}

/// Non-classicality depth of identifier `id` (for example "E001", "M1001").
///
/// # Safety
/// `d` must be a live handle, `id` a NUL-terminated string, `tau` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_ncd(d: *const TbJointDist, id: *const c_char, tau: *mut f64) -> TbStatus {
    guard(|| {
        let d = &deref(d, "dist")?.0;
        let id: Nci = text(id, "id")?.parse()?;
        let m = moments::intensity_moments(d, id.order().max(2))?;
        *out(tau, "tau")? = moments::ncd(&m, id, None)?.tau;
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn tb_dist_free(d: *mut TbJointDist) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Simulated click stream. `k` and `block_len` set the pump correlation (0 and 1 for none).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tb_simulate(
    p: *const TbTwbParams,
    signal: *const TbDetector,
    idler: *const TbDetector,
    k: f64,
    block_len: usize,
    n_windows: usize,
    seed: u64,
    result: *mut *mut TbStream,
) -> TbStatus {
    guard(|| {
        let p = params(deref(p, "params")?);
        let (s, i) = (spec(deref(signal, "signal")?), spec(deref(idler, "idler")?));
        let r = out(result, "result")?;
        let pump = PumpCorrelation { k, block_len };
        *r = boxed(TbStream(simulate::sample_stream(&p, &s, &i, &pump, n_windows, seed)?));
        Ok(())
    })
}

/// Reads a click stream file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `result` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_stream_read(path: *const c_char, result: *mut *mut TbStream) -> TbStatus {
    guard(|| {
        let path = text(path, "path")?;
        let r = out(result, "result")?;
        *r = boxed(TbStream(formats::read_clicks(Path::new(path))?));
        Ok(())
    })
}

/// Writes a click stream file atomically.
///
/// # Safety
/// `s` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tb_stream_write(s: *const TbStream, path: *const c_char) -> TbStatus {
    guard(|| {
        let s = &deref(s, "stream")?.0;
        formats::write_clicks(Path::new(text(path, "path")?), s)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be a live handle; `len` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_stream_len(s: *const TbStream, len: *mut usize) -> TbStatus {
    guard(|| {
        *out(len, "len")? = deref(s, "stream")?.0.len();
        Ok(())
    })
}

/// Normalized photocount distribution of disjoint (or sliding) groups of `n` windows.
///
/// # Safety
/// `s` must be a live handle; `result` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_stream_histogram(
    s: *const TbStream,
    n: usize,
    sliding: bool,
    result: *mut *mut TbJointDist,
) -> TbStatus {
    guard(|| {
        let s = &deref(s, "stream")?.0;
        let r = out(result, "result")?;
        let pol = if sliding { GroupingPolicy::sliding(n) } else { GroupingPolicy::disjoint(n) };
        *r = boxed(TbJointDist(ingest::group_histogram(s, &pol)?.to_dist()));
        Ok(())
    })
}

/// Sub-shot-noise precision ratios for groups of `n` windows and blocks of `n_m` groups.
///
/// # Safety
/// `s` must be a live handle; `report` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn tb_precision(s: *const TbStream, n: usize, n_m: usize, report: *mut TbPrecision) -> TbStatus {
    guard(|| {
        let s = &deref(s, "stream")?.0;
        let r = metrology::precision_improvement(s, n, n_m)?;
        *out(report, "report")? = TbPrecision {
            s_cs: r.s_cs,
            s_ci: r.s_ci,
            reference_s: r.reference_s.normalized,
            reference_i: r.reference_i.normalized,
            conditioned_s: r.conditioned_s.normalized,
            conditioned_i: r.conditioned_i.normalized,
            n_blocks: r.conditioned_i.n_blocks.min(r.conditioned_s.n_blocks),
            partial_coverage: [r.reference_s, r.reference_i, r.conditioned_s, r.conditioned_i]
                .iter()
                .any(|x| x.partial_coverage),
        };
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn tb_stream_free(s: *mut TbStream) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// EM photon-number reconstruction of a photocount distribution. `n_max` 0 picks
/// the default truncation; `max_iters` 0 and `tol` <= 0 pick the defaults.
///
/// # Safety
/// All pointers must be valid; `report` may be null.
#[no_mangle]
pub unsafe extern "C" fn tb_reconstruct(
    counts: *const TbJointDist,
    signal: *const TbDetector,
    idler: *const TbDetector,
    n_max: usize,
    max_iters: usize,
    tol: f64,
    result: *mut *mut TbJointDist,
    report: *mut TbEmReport,
) -> TbStatus {
    guard(|| {
        let f = &deref(counts, "counts")?.0;
        let (s, i) = (spec(deref(signal, "signal")?), spec(deref(idler, "idler")?));
        let r = out(result, "result")?;
        let def = EmConfig::default();
        let n_max = if n_max == 0 {
            reconstruct::default_n_max(f.rows().max(f.cols()) - 1, s.eta.min(i.eta))
        } else {
            n_max
        };
        let cfg = EmConfig {
            max_iters: if max_iters == 0 { def.max_iters } else { max_iters },
            tol: if tol > 0.0 { tol } else { def.tol },
            n_max: Some(n_max),
        };
        let ts = detection::detection_matrix(&s, n_max)?;
        let ti = detection::detection_matrix(&i, n_max)?;
        let o = reconstruct::em_joint(f, &ts, &ti, &cfg)?;
        if let Some(rep) = report.as_mut() {
            *rep = TbEmReport {
                iterations: o.iterations,
                converged: o.converged,
                max_change: o.max_change,
                loglik: o.loglik.last().copied().unwrap_or(f64::NAN),
            };
        }
        *r = boxed(TbJointDist(o.dist));
        Ok(())
    })
}
