//! C ABI over the tracker, the evaluation metrics and the synthetic data
//! generator.
//!
//! Every fallible call returns an [`AptStatus`]. On failure the message is
//! kept per thread and can be copied out with [`apt_last_error`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use aptrack::cli::{synth, Preset};
use aptrack::embed::{FramePair, Image};
use aptrack::evalkit::{evaluate, EvalInput};
use aptrack::head::BBox;
use aptrack::tracker::{TrackState, Tracker};
use aptrack::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Tracker = 6,
    Eval = 7,
    NotInitialized = 8,
    Panic = 9,
}

/// Box in pixels, center convention. `score` is negative when absent.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AptBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl From<AptBox> for BBox {
    fn from(b: AptBox) -> Self {
        let bb = BBox::new(b.cx, b.cy, b.w, b.h);
        if b.score >= 0.0 {
            bb.with_score(b.score)
        } else {
            bb
        }
    }
}

impl From<BBox> for AptBox {
    fn from(b: BBox) -> Self {
        AptBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            score: b.score.unwrap_or(-1.0),
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AptMetrics {
    pub precision_at_20: f64,
    pub success_auc: f64,
    pub mpr_at_20: f64,
    pub msr_auc: f64,
    pub f_score: f64,
}

/// Trained weights and configuration.
pub struct AptModel {
    tracker: Arc<Tracker>,
}

/// Tracking session over one sequence.
pub struct AptTracker {
    tracker: Arc<Tracker>,
    state: Option<TrackState>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AptStatus {
    match e {
        Error::Io(_) | Error::Image(_) => AptStatus::Io,
        Error::Format(_) => AptStatus::Format,
        Error::Config(_) | Error::Indivisible { .. } => AptStatus::Config,
        Error::Eval(_) => AptStatus::Eval,
        _ => AptStatus::Tracker,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (AptStatus, String)>) -> AptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AptStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside aptrack".into());
            AptStatus::Panic
        }
    }
}

fn lib<T>(r: aptrack::Result<T>) -> Result<T, (AptStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (AptStatus, String) {
    (AptStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (AptStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AptStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn frame_arg(rgb: *const u8, x: *const u8, width: usize, height: usize) -> Result<FramePair, (AptStatus, String)> {
    if rgb.is_null() || x.is_null() {
        return Err(null("frame buffer"));
    }
    if width == 0 || height == 0 {
        return Err((AptStatus::InvalidArgument, "frame has zero extent".into()));
    }
    let n = width * height * 3;
    let to_image = |buf: *const u8| {
        let bytes = std::slice::from_raw_parts(buf, n);
        Image::from_data(width, height, bytes.iter().map(|b| f64::from(*b) / 255.0).collect())
    };
    lib(FramePair::new(lib(to_image(rgb))?, lib(to_image(x))?, 0))
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn apt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a training output directory (checkpoint plus `config.txt`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_model_load(dir: *const c_char, out: *mut *mut AptModel) -> AptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let tracker = lib(Tracker::load(&path_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(AptModel { tracker: Arc::new(tracker) }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`apt_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn apt_model_free(model: *mut AptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Opens a tracking session. The session keeps the model alive.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_tracker_new(model: *const AptModel, out: *mut *mut AptTracker) -> AptStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return Err(null("model or out"));
        }
        let tracker = Arc::clone(&(*model).tracker);
        *out = Box::into_raw(Box::new(AptTracker { tracker, state: None }));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`apt_tracker_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn apt_tracker_free(t: *mut AptTracker) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Starts tracking `init` on the given frame. Buffers are interleaved
/// 8-bit RGB of `width * height * 3` bytes; single-channel X data is
/// replicated across the three channels by the caller.
///
/// # Safety
/// `t` must be live; `rgb` and `x` must point to `width * height * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn apt_tracker_init(
    t: *mut AptTracker,
    rgb: *const u8,
    x: *const u8,
    width: usize,
    height: usize,
    init: AptBox,
) -> AptStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("tracker"))?;
        let fp = frame_arg(rgb, x, width, height)?;
        t.state = Some(lib(t.tracker.init(&fp, &init.into()))?);
        Ok(())
    })
}

/// Tracks one frame. `updated` (optional) reports a dynamic-template refresh.
///
/// # Safety
/// As [`apt_tracker_init`]; `out` must be writable, `updated` null or writable.
#[no_mangle]
pub unsafe extern "C" fn apt_tracker_step(
    t: *mut AptTracker,
    rgb: *const u8,
    x: *const u8,
    width: usize,
    height: usize,
    out: *mut AptBox,
    updated: *mut bool,
) -> AptStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("tracker"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fp = frame_arg(rgb, x, width, height)?;
        let st = t
            .state
            .as_mut()
            .ok_or_else(|| (AptStatus::NotInitialized, "tracker: call apt_tracker_init first".into()))?;
        let r = lib(t.tracker.track_step(st, &fp, false))?;
        *out = r.bbox.into();
        if !updated.is_null() {
            *updated = r.updated;
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn apt_iou(a: AptBox, b: AptBox) -> f64 {
    BBox::from(a).iou(&b.into())
}

#[no_mangle]
pub extern "C" fn apt_giou(a: AptBox, b: AptBox) -> f64 {
    BBox::from(a).giou(&b.into())
}

/// Scores one sequence. `gt_x` may be null to reuse `gt`; `visible` may be
/// null when every frame is visible.
///
/// # Safety
/// Non-null arrays must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_evaluate(
    preds: *const AptBox,
    gt: *const AptBox,
    gt_x: *const AptBox,
    visible: *const u8,
    n: usize,
    out: *mut AptMetrics,
) -> AptStatus {
    guard(|| {
        if preds.is_null() || gt.is_null() || out.is_null() {
            return Err(null("preds, gt or out"));
        }
        let boxes = |p: *const AptBox| std::slice::from_raw_parts(p, n).iter().map(|b| BBox::from(*b)).collect::<Vec<_>>();
        let input = EvalInput {
            preds: boxes(preds),
            gt: boxes(gt),
            gt_x: (!gt_x.is_null()).then(|| boxes(gt_x)),
            visible: if visible.is_null() {
                vec![true; n]
            } else {
                std::slice::from_raw_parts(visible, n).iter().map(|v| *v != 0).collect()
            },
        };
        let r = lib(evaluate(&[input]))?;
        *out = AptMetrics {
            precision_at_20: r.standard.pr20,
            success_auc: r.standard.auc,
            mpr_at_20: r.dual.pr20,
            msr_auc: r.dual.auc,
            f_score: r.fscore.f,
        };
        Ok(())
    })
}

/// Writes `count` synthetic sequences under `dir`. `preset` is 0 for the
/// default scene, 1 for random scenes, 2 for random scenes with
/// alternating single-modality blackouts.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn apt_synth_write(dir: *const c_char, count: usize, frames: usize, preset: u32, seed: u64) -> AptStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let preset = match preset {
            0 => Preset::Clean,
            1 => Preset::Random,
            2 => Preset::Blackout,
            other => return Err((AptStatus::InvalidArgument, format!("unknown preset {other}"))),
        };
        lib(synth(&dir, count, frames, preset, seed))?;
        Ok(())
    })
}
