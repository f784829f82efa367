//! C ABI over the wsiseg engine.
//!
//! Objects cross the boundary as opaque pointers created by a `*_new` or
//! `*_load` function and released with the matching `*_free`. Every
//! fallible call returns a [`WsisegStatus`]; on failure the message can be
//! read with [`wsiseg_last_error`] from the same thread. Strings returned
//! by the library are owned by the caller and released with
//! [`wsiseg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use wsiseg::io::{export_geojson, read_tile_plan, read_tile_predictions};
use wsiseg::mask::{iou, PlacedMask, RleMask};
use wsiseg::merge::{finish_cascade, merge_tiles, SlideInstanceSet};
use wsiseg::pipeline::{load_run_config, run_pipeline};
use wsiseg::tiling::SlideGeometry;
use wsiseg::{Error, ErrorFamily, PipelineConfig};

/// Result of every fallible call. Values match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WsisegStatus {
    Ok = 0,
    Other = 1,
    Format = 2,
    Vocabulary = 3,
    Geometry = 4,
    Configuration = 5,
    Capacity = 6,
    Io = 7,
    NullPointer = 8,
    Panic = 9,
}

impl From<ErrorFamily> for WsisegStatus {
    fn from(f: ErrorFamily) -> Self {
        match f {
            ErrorFamily::Format => WsisegStatus::Format,
            ErrorFamily::Vocabulary => WsisegStatus::Vocabulary,
            ErrorFamily::Geometry => WsisegStatus::Geometry,
            ErrorFamily::Configuration => WsisegStatus::Configuration,
            ErrorFamily::Capacity => WsisegStatus::Capacity,
            ErrorFamily::Io => WsisegStatus::Io,
            ErrorFamily::Other => WsisegStatus::Other,
        }
    }
}

/// Pipeline configuration.
pub struct WsisegConfig(PipelineConfig);

/// Binary mask placed in slide coordinates.
pub struct WsisegMask(PlacedMask);

/// Merged instances of one slide.
pub struct WsisegSlideSet(SlideInstanceSet);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Engine(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

/// Runs `f`, turning errors and panics into a status plus a message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WsisegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            WsisegStatus::Ok
        }
        Ok(Err(Failure::Engine(e))) => {
            set_error(e.to_string());
            e.family().into()
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            WsisegStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            WsisegStatus::Format
        }
        Err(_) => {
            set_error("internal panic".into());
            WsisegStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: caller passes a NUL-terminated string valid for the call.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles come from this library and are still live.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: `out` is non-null and points to writable storage.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    let c = CString::new(s).map_err(|_| Failure::Utf8("result"))?;
    // SAFETY: as in `put`.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn put_value<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: as in `put`.
    unsafe { *out = v };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wsiseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn wsiseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by `CString::into_raw` in `put_string`.
        drop(unsafe { CString::from_raw(s) });
    }
}

#[no_mangle]
pub extern "C" fn wsiseg_config_default(out: *mut *mut WsisegConfig) -> WsisegStatus {
    guard(|| put(out, WsisegConfig(PipelineConfig::default())))
}

/// Parses a configuration JSON object; missing fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_config_from_json(json: *const c_char, out: *mut *mut WsisegConfig) -> WsisegStatus {
    guard(|| {
        let text = unsafe { str_arg(json, "json") }?;
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        put(out, WsisegConfig(cfg))
    })
}

/// # Safety
/// `cfg` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_config_free(cfg: *mut WsisegConfig) {
    if !cfg.is_null() {
        // SAFETY: allocated by `put`.
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Builds a mask from column-major run lengths (background first) of a
/// `height` x `width` window whose top-left corner is `(x, y)`.
///
/// # Safety
/// `counts` must point to `n_counts` readable values.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_mask_from_rle(
    height: u32,
    width: u32,
    counts: *const u32,
    n_counts: usize,
    x: u32,
    y: u32,
    out: *mut *mut WsisegMask,
) -> WsisegStatus {
    guard(|| {
        if counts.is_null() && n_counts > 0 {
            return Err(Failure::Null("counts"));
        }
        let counts = if n_counts == 0 {
            Vec::new()
        } else {
            // SAFETY: caller guarantees `n_counts` readable values.
            unsafe { std::slice::from_raw_parts(counts, n_counts) }.to_vec()
        };
        let rle = RleMask::from_counts(height, width, counts)?;
        put(out, WsisegMask(PlacedMask::in_slide(rle, x, y)))
    })
}

/// # Safety
/// `m` must be a live mask handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_mask_area(m: *const WsisegMask, out: *mut u64) -> WsisegStatus {
    guard(|| put_value(out, unsafe { obj(m, "mask") }?.0.area()))
}

/// Intersection over union of two masks.
///
/// # Safety
/// `a` and `b` must be live mask handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_mask_iou(a: *const WsisegMask, b: *const WsisegMask, out: *mut f64) -> WsisegStatus {
    guard(|| {
        let (a, b) = unsafe { (obj(a, "a")?, obj(b, "b")?) };
        put_value(out, iou(&a.0, &b.0)?)
    })
}

/// # Safety
/// `m` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_mask_free(m: *mut WsisegMask) {
    if !m.is_null() {
        // SAFETY: allocated by `put`.
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Reads a tile plan and a directory of per-tile prediction files, then
/// edge-filters and merges them into one slide set.
///
/// # Safety
/// String arguments must be NUL-terminated; `cfg` a live handle.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_merge_files(
    cfg: *const WsisegConfig,
    slide_id: *const c_char,
    width: u32,
    height: u32,
    plan_path: *const c_char,
    predictions_dir: *const c_char,
    out: *mut *mut WsisegSlideSet,
) -> WsisegStatus {
    guard(|| {
        let cfg = unsafe { obj(cfg, "cfg") }?;
        let id = unsafe { str_arg(slide_id, "slide_id") }?;
        let plan = PathBuf::from(unsafe { str_arg(plan_path, "plan_path") }?);
        let dir = PathBuf::from(unsafe { str_arg(predictions_dir, "predictions_dir") }?);
        let geom = SlideGeometry::new(id, width, height);
        geom.validate()?;
        let tiles = read_tile_plan(&plan)?;
        let (preds, _) = read_tile_predictions(&dir, &tiles)?;
        put(out, WsisegSlideSet(merge_tiles(&preds, &geom, &cfg.0)?))
    })
}

/// Applies per-class thresholds (glomerulus, arteriole, artery) and the
/// small-instance and cross-class filters, in place.
///
/// # Safety
/// `set` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_slide_set_finish(
    set: *mut WsisegSlideSet,
    t_glomerulus: f64,
    t_arteriole: f64,
    t_artery: f64,
) -> WsisegStatus {
    guard(|| {
        // SAFETY: live handle from this library.
        let s = unsafe { set.as_mut() }.ok_or(Failure::Null("set"))?;
        let cfg = s.0.config.clone();
        let taken = std::mem::replace(&mut s.0, placeholder(&cfg));
        s.0 = finish_cascade(taken, [t_glomerulus, t_arteriole, t_artery], &cfg);
        Ok(())
    })
}

fn placeholder(cfg: &PipelineConfig) -> SlideInstanceSet {
    SlideInstanceSet {
        format_version: wsiseg::FORMAT_VERSION,
        slide_id: String::new(),
        geometry: SlideGeometry::new("", 1, 1),
        candidates: Vec::new(),
        config: cfg.clone(),
        warnings: Vec::new(),
        trace: Vec::new(),
    }
}

/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_slide_set_active_count(set: *const WsisegSlideSet, out: *mut usize) -> WsisegStatus {
    guard(|| put_value(out, unsafe { obj(set, "set") }?.0.active_count()))
}

/// The full set, all candidates with their statuses, as JSON.
///
/// # Safety
/// `set` must be a live handle; free the result with `wsiseg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_slide_set_to_json(set: *const WsisegSlideSet, out: *mut *mut c_char) -> WsisegStatus {
    guard(|| {
        let s = unsafe { obj(set, "set") }?;
        put_string(out, serde_json::to_string(&s.0).map_err(Error::from)?)
    })
}

/// Active instances as a GeoJSON FeatureCollection.
///
/// # Safety
/// `set` must be a live handle; free the result with `wsiseg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_slide_set_to_geojson(
    set: *const WsisegSlideSet,
    out: *mut *mut c_char,
) -> WsisegStatus {
    guard(|| put_string(out, export_geojson(&unsafe { obj(set, "set") }?.0, None)))
}

/// # Safety
/// `set` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_slide_set_free(set: *mut WsisegSlideSet) {
    if !set.is_null() {
        // SAFETY: allocated by `put`.
        drop(unsafe { Box::from_raw(set) });
    }
}

/// Runs the whole pipeline described by a run file.
///
/// # Safety
/// `run_file` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn wsiseg_run(run_file: *const c_char) -> WsisegStatus {
    guard(|| {
        let path = PathBuf::from(unsafe { str_arg(run_file, "run_file") }?);
        run_pipeline(&load_run_config(&path)?)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn mask(h: u32, w: u32, counts: &[u32], x: u32, y: u32) -> *mut WsisegMask {
        let mut m = ptr::null_mut();
        let st = unsafe { wsiseg_mask_from_rle(h, w, counts.as_ptr(), counts.len(), x, y, &mut m) };
        assert_eq!(st, WsisegStatus::Ok);
        m
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(wsiseg_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn mask_iou_through_handles() {
        let a = mask(4, 4, &[0, 16], 0, 0);
        let b = mask(4, 4, &[0, 16], 2, 0);
        let mut v = 0.0;
        assert_eq!(unsafe { wsiseg_mask_iou(a, b, &mut v) }, WsisegStatus::Ok);
        assert_eq!(v, 8.0 / 24.0);
        let mut area = 0;
        assert_eq!(unsafe { wsiseg_mask_area(a, &mut area) }, WsisegStatus::Ok);
        assert_eq!(area, 16);
        unsafe {
            wsiseg_mask_free(a);
            wsiseg_mask_free(b);
        }
    }

    #[test]
    fn bad_counts_report_format_error() {
        let mut m = ptr::null_mut();
        let counts = [3u32, 3];
        let st = unsafe { wsiseg_mask_from_rle(4, 4, counts.as_ptr(), 2, 0, 0, &mut m) };
        assert_eq!(st, WsisegStatus::Format);
        assert!(m.is_null());
        assert!(!last_error().is_empty());
    }

    #[test]
    fn null_handles_are_rejected() {
        let mut v = 0u64;
        assert_eq!(unsafe { wsiseg_mask_area(ptr::null(), &mut v) }, WsisegStatus::NullPointer);
        assert!(last_error().contains("mask"));
    }

    #[test]
    fn config_json_errors_map_to_configuration() {
        let mut c = ptr::null_mut();
        let bad = CString::new(r#"{"tile_size": 0}"#).unwrap();
        assert_eq!(unsafe { wsiseg_config_from_json(bad.as_ptr(), &mut c) }, WsisegStatus::Configuration);
        let good = CString::new(r#"{"thumbnail_size": 512}"#).unwrap();
        assert_eq!(unsafe { wsiseg_config_from_json(good.as_ptr(), &mut c) }, WsisegStatus::Ok);
        unsafe { wsiseg_config_free(c) };
    }
}
