//! C ABI over `dep-core`.
//!
//! Every fallible call returns a [`DepStatus`]; on failure the message is
//! kept per thread and read back with [`dep_last_error`]. Handles are opaque
//! and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dep_core::corpus::{generate_synthetic, parse_corpus, Corpus, GenConfig};
use dep_core::embedder::{embed_text, EmbedderSpec};
use dep_core::{diffrep, metrics, trainer, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Config = 4,
    Data = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

impl From<&Error> for DepStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => DepStatus::Config,
            Error::Io { .. } => DepStatus::Io,
            Error::Data(_) | Error::Format(_) => DepStatus::Data,
            Error::Numerical { .. } | Error::Dimension { .. } | Error::Graph(_) => DepStatus::Numerical,
        }
    }
}

/// Frozen embedder configuration.
pub struct DepEmbedder {
    spec: EmbedderSpec,
}

/// A validated review corpus.
pub struct DepCorpus {
    corpus: Corpus,
    rejected: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepRouge1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(DepStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(DepStatus::from(&e), e.to_string())
    }
}

type Res<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> Res<()>) -> DepStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DepStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside dep-ffi");
            DepStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DepStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DepStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Res<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Res<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

unsafe fn fill(out: *mut f64, out_len: usize, v: &[f64]) -> Res<()> {
    if out_len < v.len() {
        return Err(Fail(
            DepStatus::BufferTooSmall,
            format!("output holds {out_len} values, {} needed", v.len()),
        ));
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn dep_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Human-readable name of a status code (static storage).
#[no_mangle]
pub extern "C" fn dep_status_name(status: DepStatus) -> *const c_char {
    let s: &'static CStr = match status {
        DepStatus::Ok => c"ok",
        DepStatus::NullPointer => c"null_pointer",
        DepStatus::InvalidUtf8 => c"invalid_utf8",
        DepStatus::BufferTooSmall => c"buffer_too_small",
        DepStatus::Config => c"config",
        DepStatus::Data => c"data",
        DepStatus::Numerical => c"numerical",
        DepStatus::Io => c"io",
        DepStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Embedder with the default configuration (1024 dimensions).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dep_embedder_new_default(out: *mut *mut DepEmbedder) -> DepStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(DepEmbedder { spec: EmbedderSpec::default() }))))
}

/// Embedder with explicit settings; rejected settings return `Config`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dep_embedder_new(
    dim: usize,
    ngram_min: usize,
    ngram_max: usize,
    num_buckets: u32,
    seed: u64,
    out: *mut *mut DepEmbedder,
) -> DepStatus {
    guard(|| {
        let spec = EmbedderSpec { dim, ngram_min, ngram_max, num_buckets, seed };
        spec.validate()?;
        write_out(out, Box::into_raw(Box::new(DepEmbedder { spec })))
    })
}

/// # Safety
/// `h` must be null or a handle from `dep_embedder_new*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dep_embedder_free(h: *mut DepEmbedder) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Output dimension, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live embedder handle.
#[no_mangle]
pub unsafe extern "C" fn dep_embedder_dim(h: *const DepEmbedder) -> usize {
    h.as_ref().map_or(0, |e| e.spec.dim)
}

/// Embeds NUL-terminated UTF-8 `text` into `out[0..dim]`.
///
/// # Safety
/// `h` must be a live handle, `text` a NUL-terminated string and `out` valid
/// for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dep_embedder_embed(
    h: *const DepEmbedder,
    text_ptr: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> DepStatus {
    guard(|| {
        let e = h.as_ref().ok_or_else(|| null("embedder"))?;
        let t = text(text_ptr, "text")?;
        fill(out, out_len, &embed_text(&e.spec, t))
    })
}

/// Parses a corpus from main and meta line-delimited JSON. Malformed lines are
/// skipped and counted; a corpus with no valid review is a `Data` error.
///
/// # Safety
/// `main` and `meta` must be NUL-terminated strings, `out` valid for one handle.
#[no_mangle]
pub unsafe extern "C" fn dep_corpus_parse(
    main: *const c_char,
    meta: *const c_char,
    out: *mut *mut DepCorpus,
) -> DepStatus {
    guard(|| {
        let (corpus, report) = parse_corpus(text(main, "main")?, text(meta, "meta")?)?;
        let h = DepCorpus { corpus, rejected: report.rejected.len() };
        write_out(out, Box::into_raw(Box::new(h)))
    })
}

/// Seeded synthetic corpus.
///
/// # Safety
/// `out` must be valid for one handle.
#[no_mangle]
pub unsafe extern "C" fn dep_corpus_synthetic(
    users: usize,
    items: usize,
    reviews_per_user: usize,
    seed: u64,
    out: *mut *mut DepCorpus,
) -> DepStatus {
    guard(|| {
        let cfg = GenConfig { users, items, reviews_per_user, seed, ..Default::default() };
        let files = generate_synthetic(&cfg)?;
        let (corpus, _) = parse_corpus(&files.main, &files.meta)?;
        write_out(out, Box::into_raw(Box::new(DepCorpus { corpus, rejected: 0 })))
    })
}

/// # Safety
/// `h` must be null or a live corpus handle.
#[no_mangle]
pub unsafe extern "C" fn dep_corpus_free(h: *mut DepCorpus) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be null or a live corpus handle.
#[no_mangle]
pub unsafe extern "C" fn dep_corpus_num_reviews(h: *const DepCorpus) -> usize {
    h.as_ref().map_or(0, |c| c.corpus.reviews().len())
}

/// # Safety
/// `h` must be null or a live corpus handle.
#[no_mangle]
pub unsafe extern "C" fn dep_corpus_num_users(h: *const DepCorpus) -> usize {
    h.as_ref().map_or(0, |c| c.corpus.num_users())
}

/// # Safety
/// `h` must be null or a live corpus handle.
#[no_mangle]
pub unsafe extern "C" fn dep_corpus_num_rejected(h: *const DepCorpus) -> usize {
    h.as_ref().map_or(0, |c| c.rejected)
}

/// `out = mean over rows p of (e_his − p)` for `peers` stored row-major as
/// `m × d`; zeros when `m = 0`.
///
/// # Safety
/// `e_his` and `out` must be valid for `d` doubles, `peers` for `m * d`.
#[no_mangle]
pub unsafe extern "C" fn dep_difference(
    e_his: *const f64,
    d: usize,
    peers: *const f64,
    m: usize,
    out: *mut f64,
) -> DepStatus {
    guard(|| {
        let e = slice(e_his, d, "e_his")?;
        let n = m.checked_mul(d).ok_or_else(|| Fail(DepStatus::Data, "m * d overflows".into()))?;
        let rows = slice(peers, n, "peers")?;
        let p: Vec<Vec<f64>> = if d == 0 { Vec::new() } else { rows.chunks(d).map(<[f64]>::to_vec).collect() };
        fill(out, d, &diffrep::difference(e, &p)?)
    })
}

/// `l_gen + lambda * (l_recon + gamma * l_sparse)`.
///
/// # Safety
/// `out` must be valid for one double.
#[no_mangle]
pub unsafe extern "C" fn dep_total_loss(
    l_gen: f64,
    l_recon: f64,
    l_sparse: f64,
    lambda: f64,
    gamma: f64,
    out: *mut f64,
) -> DepStatus {
    guard(|| write_out(out, trainer::total_loss(l_gen, l_recon, l_sparse, lambda, gamma)))
}

/// # Safety
/// Both strings must be NUL-terminated; `out` valid for one struct.
#[no_mangle]
pub unsafe extern "C" fn dep_rouge1(candidate: *const c_char, reference: *const c_char, out: *mut DepRouge1) -> DepStatus {
    guard(|| {
        let r = metrics::rouge1(text(candidate, "candidate")?, text(reference, "reference")?);
        write_out(out, DepRouge1 { precision: r.precision, recall: r.recall, f1: r.f1 })
    })
}

/// # Safety
/// Both strings must be NUL-terminated; `out` valid for one double.
#[no_mangle]
pub unsafe extern "C" fn dep_meteor(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> DepStatus {
    guard(|| write_out(out, metrics::meteor_lite(text(candidate, "candidate")?, text(reference, "reference")?)))
}

/// Corpus BLEU-4 (0 to 100) over `n` candidate/reference pairs.
///
/// # Safety
/// `candidates` and `references` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dep_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> DepStatus {
    guard(|| {
        if n > 0 && (candidates.is_null() || references.is_null()) {
            return Err(null("string array"));
        }
        let mut c = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for i in 0..n {
            c.push(text(*candidates.add(i), "candidate")?.to_string());
            r.push(text(*references.add(i), "reference")?.to_string());
        }
        write_out(out, metrics::bleu(&c, &r)?)
    })
}
