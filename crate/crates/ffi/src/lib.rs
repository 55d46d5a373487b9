//! C ABI over construct-core.
//!
//! Every function returns a [`ConstructStatus`]; outputs go through pointer
//! arguments. Strings handed out by the library are NUL-terminated UTF-8 and
//! must be released with [`construct_string_free`]. On failure the reason is
//! available from [`construct_last_error`] until the next call on the same
//! thread. Structured values cross the boundary as JSON text.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use construct_core::classgen::{plan_batches, ClassRegistry};
use construct_core::classify::parse_fit;
use construct_core::corpus::{segment, Document, Granularity, SentenceSplitter};
use construct_core::gateway::extract_json;
use construct_core::metrics::krippendorff_alpha;
use construct_core::review::{DecisionInput, ReviewService};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstructStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// An argument was well-formed text but not an acceptable value.
    InvalidInput = 3,
    /// The model reply could not be parsed.
    ParseFailed = 4,
    /// A review decision was refused; the registry is unchanged.
    Rejected = 5,
    /// The statistic is undefined for this input.
    Undefined = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstructGranularity {
    Sentence = 0,
    Paragraph = 1,
    FullText = 2,
}

/// Review session over an in-memory candidate registry.
pub struct ConstructReview {
    service: ReviewService,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type Fallible<T> = Result<T, (ConstructStatus, String)>;

fn fail<T>(status: ConstructStatus, msg: impl Into<String>) -> Fallible<T> {
    Err((status, msg.into()))
}

/// Clear the error slot, run `f` with panics contained, and record any failure.
fn guard(f: impl FnOnce() -> Fallible<()>) -> ConstructStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ConstructStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ConstructStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Fallible<&'a str> {
    if p.is_null() {
        return fail(ConstructStatus::NullArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (ConstructStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn json_arg<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Fallible<T> {
    serde_json::from_str(s).map_err(|e| (ConstructStatus::InvalidInput, format!("{what}: {e}")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Fallible<()> {
    if out.is_null() {
        return fail(ConstructStatus::NullArgument, format!("{what} is null"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String, what: &str) -> Fallible<()> {
    let c = CString::new(s).map_err(|_| (ConstructStatus::InvalidInput, "output holds a NUL byte".to_string()))?;
    put(out, c.into_raw(), what)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

/// Message for the last failed call on this thread, or null. Owned by the
/// library; valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn construct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn construct_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn construct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Pull the JSON object out of a model reply (fences, surrounding prose and
/// trailing commas are tolerated). `out_json` receives the compact object.
///
/// # Safety
/// `raw` must be a NUL-terminated string; `out_json` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn construct_extract_json(raw: *const c_char, out_json: *mut *mut c_char) -> ConstructStatus {
    guard(|| {
        let raw = text(raw, "raw")?;
        let obj = extract_json(raw).map_err(|e| (ConstructStatus::ParseFailed, e.to_string()))?;
        put_string(out_json, to_json(&obj), "out_json")
    })
}

/// Parse a fit-rating reply. `out_rationale` may be null when not wanted.
///
/// # Safety
/// `raw` must be a NUL-terminated string; `out_fit` writable; `out_rationale`
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn construct_parse_fit(
    raw: *const c_char,
    out_fit: *mut u8,
    out_rationale: *mut *mut c_char,
) -> ConstructStatus {
    guard(|| {
        let raw = text(raw, "raw")?;
        let (rationale, fit) = parse_fit(raw).map_err(|e| (ConstructStatus::ParseFailed, e.to_string()))?;
        put(out_fit, fit, "out_fit")?;
        if !out_rationale.is_null() {
            put_string(out_rationale, rationale, "out_rationale")?;
        }
        Ok(())
    })
}

/// Split a text into units. `out_json` receives an array of unit texts.
///
/// # Safety
/// `text_in` must be a NUL-terminated string; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn construct_segment(
    text_in: *const c_char,
    granularity: ConstructGranularity,
    out_json: *mut *mut c_char,
) -> ConstructStatus {
    guard(|| {
        let body = text(text_in, "text")?;
        let doc = Document {
            doc_id: "doc".into(),
            title: String::new(),
            body: body.to_string(),
            metadata: BTreeMap::new(),
        };
        let g = match granularity {
            ConstructGranularity::Sentence => Granularity::Sentence,
            ConstructGranularity::Paragraph => Granularity::Paragraph,
            ConstructGranularity::FullText => Granularity::FullText,
        };
        let units: Vec<String> = segment(&doc, g, &SentenceSplitter::default())
            .into_iter()
            .map(|u| u.text)
            .collect();
        put_string(out_json, to_json(&units), "out_json")
    })
}

/// Nominal Krippendorff's alpha. `units_json` is an array with one array of
/// category strings per unit (one entry per coder who coded it).
///
/// # Safety
/// `units_json` must be a NUL-terminated string; `out_alpha` writable.
#[no_mangle]
pub unsafe extern "C" fn construct_krippendorff_alpha(
    units_json: *const c_char,
    out_alpha: *mut f64,
) -> ConstructStatus {
    guard(|| {
        let units: Vec<Vec<String>> = json_arg(text(units_json, "units_json")?, "units_json")?;
        let alpha = krippendorff_alpha(&units).map_err(|e| (ConstructStatus::Undefined, e.to_string()))?;
        put(out_alpha, alpha, "out_alpha")
    })
}

/// Overlap-sampled batch plan over `ids_json` (an array of unit ids).
/// `out_json` receives the plan.
///
/// # Safety
/// `ids_json` must be a NUL-terminated string; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn construct_plan_batches(
    ids_json: *const c_char,
    batch_size: usize,
    carryover: f64,
    classes_per_call_cap: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> ConstructStatus {
    guard(|| {
        let ids: Vec<String> = json_arg(text(ids_json, "ids_json")?, "ids_json")?;
        let plan = plan_batches(&ids, batch_size, carryover, classes_per_call_cap, seed)
            .map_err(|e| (ConstructStatus::InvalidInput, e.to_string()))?;
        put_string(out_json, to_json(&plan), "out_json")
    })
}

/// Start a review over a candidate registry (as written to `registry.json`'s
/// `data`). Free the handle with [`construct_review_free`].
///
/// # Safety
/// `registry_json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn construct_review_open(
    registry_json: *const c_char,
    out: *mut *mut ConstructReview,
) -> ConstructStatus {
    guard(|| {
        let registry: ClassRegistry = json_arg(text(registry_json, "registry_json")?, "registry_json")?;
        let service = ReviewService::open(registry, BTreeMap::new(), None)
            .map_err(|e| (ConstructStatus::InvalidInput, e.to_string()))?;
        put(out, Box::into_raw(Box::new(ConstructReview { service })), "out")
    })
}

unsafe fn review<'a>(h: *mut ConstructReview) -> Fallible<&'a mut ConstructReview> {
    h.as_mut()
        .ok_or((ConstructStatus::NullArgument, "review handle is null".to_string()))
}

/// Apply one decision, e.g. `{"subject": "AI Risks", "action": "keep"}`.
/// A refused decision returns `Rejected` and leaves the registry unchanged.
///
/// # Safety
/// `handle` must come from [`construct_review_open`]; `decision_json` must be
/// a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn construct_review_apply(
    handle: *mut ConstructReview,
    decision_json: *const c_char,
) -> ConstructStatus {
    guard(|| {
        let r = review(handle)?;
        let input: DecisionInput = json_arg(text(decision_json, "decision_json")?, "decision_json")?;
        r.service
            .apply_decision(input)
            .map(drop)
            .map_err(|e| (ConstructStatus::Rejected, e.to_string()))
    })
}

/// Current folded registry as JSON.
///
/// # Safety
/// `handle` must come from [`construct_review_open`]; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn construct_review_state(
    handle: *mut ConstructReview,
    out_json: *mut *mut c_char,
) -> ConstructStatus {
    guard(|| {
        let r = review(handle)?;
        put_string(out_json, to_json(&r.service.state().registry), "out_json")
    })
}

/// The finalized class set as JSON; `Rejected` before finalize.
///
/// # Safety
/// `handle` must come from [`construct_review_open`]; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn construct_review_export(
    handle: *mut ConstructReview,
    out_json: *mut *mut c_char,
) -> ConstructStatus {
    guard(|| {
        let r = review(handle)?;
        let set = r
            .service
            .export_final()
            .map_err(|e| (ConstructStatus::Rejected, e.to_string()))?;
        put_string(out_json, to_json(&set), "out_json")
    })
}

/// Release a review handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`construct_review_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn construct_review_free(handle: *mut ConstructReview) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
