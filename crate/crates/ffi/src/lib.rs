//! C ABI over the gdig core.
//!
//! Every fallible function returns a [`GdigStatus`]; on failure the message is
//! available from [`gdig_last_error`] on the same thread until the next call.
//! Objects are opaque handles released by their matching `_free` function.
//! Strings returned to the caller are released with [`gdig_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gdig::cli::{bleu, paired_t_test};
use gdig::curvature::{prepare_inverse, read_factors, DampedInverse};
use gdig::gradfeat::{FeatureVector, GradCache};
use gdig::influence::influence_pair;
use gdig::toylm::{load_params, loss, render_prompt, Example, Params};
use gdig::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GdigStatus {
    Ok = 0,
    NullPointer = 1,
    Utf8 = 2,
    Shape = 3,
    Singular = 4,
    Input = 5,
    Degenerate = 6,
    Divergence = 7,
    Size = 8,
    Precondition = 9,
    Format = 10,
    Cache = 11,
    Config = 12,
    Io = 13,
    Panic = 14,
}

impl From<&Error> for GdigStatus {
    fn from(e: &Error) -> Self {
        match e.code() {
            "E_SHAPE" => GdigStatus::Shape,
            "E_SINGULAR" => GdigStatus::Singular,
            "E_INPUT" => GdigStatus::Input,
            "E_DEGENERATE" => GdigStatus::Degenerate,
            "E_DIVERGENCE" => GdigStatus::Divergence,
            "E_SIZE" => GdigStatus::Size,
            "E_PRECONDITION" => GdigStatus::Precondition,
            "E_FORMAT" => GdigStatus::Format,
            "E_CACHE" => GdigStatus::Cache,
            "E_CONFIG" => GdigStatus::Config,
            _ => GdigStatus::Io,
        }
    }
}

/// Loaded model parameters.
pub struct GdigModel(Params);
/// Gradient feature cache.
pub struct GdigGradCache(GradCache);
/// Damped inverse curvature.
pub struct GdigInverse(DampedInverse);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(GdigStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(GdigStatus::from(&e), format!("{}: {e}", e.code()))
    }
}

fn null(what: &str) -> Fail {
    Fail(GdigStatus::NullPointer, format!("null pointer: {what}"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GdigStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GdigStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GdigStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GdigStatus::Utf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next gdig call on this thread.
#[no_mangle]
pub extern "C" fn gdig_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gdig_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdig_model_load(path: *const c_char, out: *mut *mut GdigModel) -> GdigStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let params = load_params(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(GdigModel(params)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`gdig_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gdig_model_free(model: *mut GdigModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn gdig_model_param_count(model: *const GdigModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.len())
}

/// Response-only negative log-likelihood of one example.
///
/// # Safety
/// Token arrays must hold the given number of elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gdig_model_loss(
    model: *const GdigModel,
    prompt: *const u32,
    prompt_len: usize,
    response: *const u32,
    response_len: usize,
    out: *mut f64,
) -> GdigStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_arg(out, "out")?;
        let ex = Example::new(
            "ffi",
            slice_arg(prompt, prompt_len, "prompt")?.to_vec(),
            slice_arg(response, response_len, "response")?.to_vec(),
        );
        *out = loss(&model.0, &ex)?;
        Ok(())
    })
}

/// Renders the translation instruction. The result is released with [`gdig_string_free`].
///
/// # Safety
/// Both inputs must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gdig_render_prompt(
    src_text: *const c_char,
    trg_lang: *const c_char,
    out: *mut *mut c_char,
) -> GdigStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = render_prompt(str_arg(src_text, "src_text")?, str_arg(trg_lang, "trg_lang")?);
        let c = CString::new(s).map_err(|_| Fail(GdigStatus::Input, "interior NUL".into()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn gdig_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdig_cache_open(path: *const c_char, out: *mut *mut GdigGradCache) -> GdigStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cache = GradCache::read(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(GdigGradCache(cache)));
        Ok(())
    })
}

/// # Safety
/// `cache` must come from [`gdig_cache_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gdig_cache_free(cache: *mut GdigGradCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// # Safety
/// `cache` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn gdig_cache_count(cache: *const GdigGradCache) -> usize {
    cache.as_ref().map_or(0, |c| c.0.count())
}

/// # Safety
/// `cache` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn gdig_cache_dim(cache: *const GdigGradCache) -> usize {
    cache.as_ref().map_or(0, |c| c.0.dim)
}

/// Copies row `index` into `buf`, which must hold exactly `gdig_cache_dim` floats.
///
/// # Safety
/// `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn gdig_cache_row(
    cache: *const GdigGradCache,
    index: usize,
    buf: *mut f32,
    len: usize,
) -> GdigStatus {
    guard(|| {
        let cache = &cache.as_ref().ok_or_else(|| null("cache"))?.0;
        if index >= cache.count() {
            return Err(Error::Input(format!("row {index} of {}", cache.count())).into());
        }
        if len != cache.dim {
            return Err(Error::Shape(format!("buffer of {len} for dim {}", cache.dim)).into());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(cache.row(index));
        Ok(())
    })
}

/// Reads a KFAC factor file and prepares `(A⊗G + λI)⁻¹`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdig_inverse_from_factors(
    path: *const c_char,
    lambda: f64,
    out: *mut *mut GdigInverse,
) -> GdigStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let factors = read_factors(Path::new(str_arg(path, "path")?))?;
        let inv = prepare_inverse(&factors, lambda)?;
        *out = Box::into_raw(Box::new(GdigInverse(inv)));
        Ok(())
    })
}

/// # Safety
/// `inv` must come from [`gdig_inverse_from_factors`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gdig_inverse_free(inv: *mut GdigInverse) {
    if !inv.is_null() {
        drop(Box::from_raw(inv));
    }
}

/// # Safety
/// `inv` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn gdig_inverse_dim(inv: *const GdigInverse) -> usize {
    inv.as_ref().map_or(0, |i| i.0.dim())
}

/// Influence of a candidate feature on a test feature, `−g_tᵀ (H + λI)⁻¹ g_m`.
///
/// # Safety
/// Both feature arrays must hold `dim` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gdig_influence_pair(
    inv: *const GdigInverse,
    g_test: *const f32,
    g_candidate: *const f32,
    dim: usize,
    out: *mut f64,
) -> GdigStatus {
    guard(|| {
        let inv = &inv.as_ref().ok_or_else(|| null("inv"))?.0;
        let out = out_arg(out, "out")?;
        let t = FeatureVector {
            id: "test".into(),
            values: slice_arg(g_test, dim, "g_test")?.to_vec(),
        };
        let m = FeatureVector {
            id: "candidate".into(),
            values: slice_arg(g_candidate, dim, "g_candidate")?.to_vec(),
        };
        *out = influence_pair(inv, &t, &m)?;
        Ok(())
    })
}

unsafe fn strings(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Fail> {
    slice_arg(p, n, what)?
        .iter()
        .map(|&s| str_arg(s, what).map(str::to_owned))
        .collect()
}

/// Corpus BLEU-4 of `n` hypothesis/reference pairs.
///
/// # Safety
/// Both arrays must hold `n` NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gdig_bleu(
    hypotheses: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> GdigStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let h = strings(hypotheses, n, "hypotheses")?;
        let r = strings(references, n, "references")?;
        *out = bleu(&h, &r)?;
        Ok(())
    })
}

/// Paired two-sided t-test of `a − b`.
///
/// # Safety
/// `a` and `b` must hold `n` doubles; `t` and `p` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gdig_paired_t_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    t: *mut f64,
    p: *mut f64,
) -> GdigStatus {
    guard(|| {
        let t = out_arg(t, "t")?;
        let p = out_arg(p, "p")?;
        let (tv, pv) = paired_t_test(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?)?;
        *t = tv;
        *p = pv;
        Ok(())
    })
}
