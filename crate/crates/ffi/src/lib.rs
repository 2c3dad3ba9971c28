//! C ABI over the cascade library. All handles are opaque; every function
//! returns a `FrugalStatus` and reports details through
//! `frugal_last_error_message`. Strings cross the boundary as UTF-8,
//! money as nano-USD integers or decimal strings.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use frugal::cascade::{replay_route, CascadeConfig};
use frugal::cost::{format_money, parse_pricing_str, query_cost, Marketplace, Usage};
use frugal::scorer::{Scorer, ScorerModel};
use frugal::trace::{load_trace_str, RewardFn, TraceRecord};

/// Status codes returned by every FFI entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrugalStatus {
    FrugalOk = 0,
    FrugalErrNullArgument = 1,
    FrugalErrInvalidUtf8 = 2,
    FrugalErrParse = 3,
    FrugalErrOverflow = 4,
    FrugalErrUnknownLlm = 5,
    FrugalErrEngine = 6,
    FrugalErrBufferTooSmall = 7,
}

use FrugalStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn fail(status: FrugalStatus, msg: impl Into<String>) -> FrugalStatus {
    let msg: String = msg.into();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(msg.replace('\0', " ")).unwrap();
    });
    status
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn frugal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

pub struct FrugalMarketplace(Marketplace);
pub struct FrugalTrace(Vec<TraceRecord>);
pub struct FrugalScorer(ScorerModel);
pub struct FrugalCascade(CascadeConfig);

/// # Safety
/// `ptr` must be NUL-terminated and remain valid for the call.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, FrugalStatus> {
    if ptr.is_null() {
        return Err(fail(FrugalErrNullArgument, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| fail(FrugalErrInvalidUtf8, e.to_string()))
}

macro_rules! check_out {
    ($out:expr) => {
        if $out.is_null() {
            return fail(FrugalErrNullArgument, "null out-parameter");
        }
    };
}

macro_rules! deref {
    ($handle:expr) => {
        match $handle.as_ref() {
            Some(h) => h,
            None => return fail(FrugalErrNullArgument, "null handle"),
        }
    };
}

/// Parse a line-delimited JSON marketplace into a handle.
///
/// # Safety
/// `jsonl` must point to a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn frugal_marketplace_parse(
    jsonl: *const c_char,
    out: *mut *mut FrugalMarketplace,
) -> FrugalStatus {
    check_out!(out);
    let text = match read_str(jsonl) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match parse_pricing_str(text) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(FrugalMarketplace(m)));
            FrugalOk
        }
        Err(e) => fail(FrugalErrParse, e.to_string()),
    }
}

/// # Safety
/// `handle` must come from `frugal_marketplace_parse` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn frugal_marketplace_free(handle: *mut FrugalMarketplace) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Parse a line-delimited JSON trace. `reward_fn`: 0 exact match, 1 token F1.
///
/// # Safety
/// Pointer arguments as in `frugal_marketplace_parse`.
#[no_mangle]
pub unsafe extern "C" fn frugal_trace_parse(
    jsonl: *const c_char,
    marketplace: *const FrugalMarketplace,
    reward_fn: i32,
    out: *mut *mut FrugalTrace,
) -> FrugalStatus {
    check_out!(out);
    let market = deref!(marketplace);
    let text = match read_str(jsonl) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let reward = match reward_fn {
        0 => RewardFn::ExactMatch,
        1 => RewardFn::TokenF1,
        other => return fail(FrugalErrParse, format!("unknown reward_fn {other}")),
    };
    match load_trace_str(text, &market.0, reward) {
        Ok(loaded) => {
            *out = Box::into_raw(Box::new(FrugalTrace(loaded.records)));
            FrugalOk
        }
        Err(e) => fail(FrugalErrParse, e.to_string()),
    }
}

/// # Safety
/// `handle` must come from `frugal_trace_parse` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn frugal_trace_free(handle: *mut FrugalTrace) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Load a scorer model from its JSON serialization.
///
/// # Safety
/// Pointer arguments as in `frugal_marketplace_parse`.
#[no_mangle]
pub unsafe extern "C" fn frugal_scorer_load_json(
    json: *const c_char,
    out: *mut *mut FrugalScorer,
) -> FrugalStatus {
    check_out!(out);
    let text = match read_str(json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match serde_json::from_str::<ScorerModel>(text) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(FrugalScorer(model)));
            FrugalOk
        }
        Err(e) => fail(FrugalErrParse, e.to_string()),
    }
}

/// # Safety
/// `handle` must come from `frugal_scorer_load_json` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn frugal_scorer_free(handle: *mut FrugalScorer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Load a cascade config from its JSON serialization.
///
/// # Safety
/// Pointer arguments as in `frugal_marketplace_parse`.
#[no_mangle]
pub unsafe extern "C" fn frugal_cascade_load_json(
    json: *const c_char,
    out: *mut *mut FrugalCascade,
) -> FrugalStatus {
    check_out!(out);
    let text = match read_str(json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    match serde_json::from_str::<CascadeConfig>(text) {
        Ok(config) => {
            *out = Box::into_raw(Box::new(FrugalCascade(config)));
            FrugalOk
        }
        Err(e) => fail(FrugalErrParse, e.to_string()),
    }
}

/// # Safety
/// `handle` must come from `frugal_cascade_load_json` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn frugal_cascade_free(handle: *mut FrugalCascade) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Exact cost of one query in nano-USD (1e-9 USD).
///
/// # Safety
/// Pointer arguments as in `frugal_marketplace_parse`.
#[no_mangle]
pub unsafe extern "C" fn frugal_query_cost(
    marketplace: *const FrugalMarketplace,
    llm_id: *const c_char,
    input_tokens: u32,
    output_tokens: u32,
    out_nano_usd: *mut i64,
) -> FrugalStatus {
    check_out!(out_nano_usd);
    let market = deref!(marketplace);
    let llm_id = match read_str(llm_id) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let Ok(spec) = market.0.get(llm_id) else {
        return fail(FrugalErrUnknownLlm, format!("unknown llm '{llm_id}'"));
    };
    match query_cost(&spec.pricing, Usage::new(input_tokens, output_tokens)) {
        Ok(cost) => {
            *out_nano_usd = cost.nano_usd();
            FrugalOk
        }
        Err(e) => fail(FrugalErrOverflow, e.to_string()),
    }
}

/// Render nano-USD as a decimal USD string into the caller's buffer.
///
/// # Safety
/// `buf` must point to at least `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn frugal_format_money(
    nano_usd: i64,
    buf: *mut c_char,
    buf_len: usize,
) -> FrugalStatus {
    check_out!(buf);
    let text = format_money(frugal::cost::Money::from_nano_usd(nano_usd));
    let bytes = text.as_bytes();
    if bytes.len() + 1 > buf_len {
        return fail(
            FrugalErrBufferTooSmall,
            format!("need {} bytes, have {buf_len}", bytes.len() + 1),
        );
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    FrugalOk
}

/// Score an (query, answer, llm) triple with the loaded model.
///
/// # Safety
/// Pointer arguments as in `frugal_marketplace_parse`.
#[no_mangle]
pub unsafe extern "C" fn frugal_score(
    scorer: *const FrugalScorer,
    query: *const c_char,
    answer: *const c_char,
    llm_id: *const c_char,
    out_score: *mut f64,
) -> FrugalStatus {
    check_out!(out_score);
    let model = deref!(scorer);
    let (query, answer, llm_id) = match (read_str(query), read_str(answer), read_str(llm_id)) {
        (Ok(q), Ok(a), Ok(l)) => (q, a, l),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    *out_score = model.0.score(query, answer, llm_id);
    FrugalOk
}

/// Replay the cascade on one trace record (looked up by query_id) and
/// return the RouteOutcome as a JSON string. Free it with
/// `frugal_string_free`.
///
/// # Safety
/// Pointer arguments as in `frugal_marketplace_parse`.
#[no_mangle]
pub unsafe extern "C" fn frugal_replay_route(
    cascade: *const FrugalCascade,
    scorer: *const FrugalScorer,
    marketplace: *const FrugalMarketplace,
    trace: *const FrugalTrace,
    query_id: *const c_char,
    out_json: *mut *mut c_char,
) -> FrugalStatus {
    check_out!(out_json);
    let cascade = deref!(cascade);
    let scorer = deref!(scorer);
    let market = deref!(marketplace);
    let trace = deref!(trace);
    let query_id = match read_str(query_id) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let Some(record) = trace.0.iter().find(|r| r.query_id == query_id) else {
        return fail(FrugalErrParse, format!("query_id '{query_id}' not in trace"));
    };
    match replay_route(&cascade.0, &scorer.0, &market.0, record) {
        Ok(outcome) => {
            let json = serde_json::to_string(&outcome).expect("outcome serializes");
            let cstring = CString::new(json.replace('\0', " ")).unwrap();
            *out_json = cstring.into_raw();
            FrugalOk
        }
        Err(e) => fail(FrugalErrEngine, e.to_string()),
    }
}

/// # Safety
/// `ptr` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn frugal_string_free(ptr: *mut c_char) {
    if !ptr.is_null() {
        drop(CString::from_raw(ptr));
    }
}
