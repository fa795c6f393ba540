//! C ABI over the recall-span decoder.
//!
//! A `RecallDecoder` is an opaque handle owning one generation state. All
//! functions return a [`RecallStatus`]; on failure a message is available
//! from [`recall_last_error`] on the same thread. Handles are not
//! thread-safe: use one per decoding stream.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use recall_core::context::TokenId;
use recall_core::decoder::{apply_mask_in_place, DecodeError, DecoderConfig, GenerationState, Mode};

/// Opaque decoder handle.
pub struct RecallDecoder {
    state: GenerationState,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecallStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidContinuation = 3,
    BufferTooSmall = 4,
    LengthMismatch = 5,
    OutOfRange = 6,
    Internal = 7,
}

pub const RECALL_MODE_OUTSIDE: i32 = 0;
pub const RECALL_MODE_INSIDE: i32 = 1;

/// Summary of one recall span.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecallSpanInfo {
    /// Number of span tokens (delimiters excluded).
    pub len: usize,
    /// Half-open position of the span in the generated stream.
    pub gen_start: usize,
    pub gen_end: usize,
    /// Context length when the span opened.
    pub snapshot_len: usize,
    /// Occurrences of the span in its snapshot.
    pub n_positions: usize,
    /// First occurrence, or `SIZE_MAX` when there is none.
    pub first_position: usize,
    pub truncated: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: RecallStatus, msg: impl Into<String>) -> RecallStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn decode_status(e: DecodeError) -> RecallStatus {
    let status = match &e {
        DecodeError::Config(_) => RecallStatus::InvalidConfig,
        DecodeError::InvalidContinuation { .. } => RecallStatus::InvalidContinuation,
        DecodeError::LengthMismatch { .. } => RecallStatus::LengthMismatch,
        DecodeError::EmptyMask | DecodeError::Index(_) => RecallStatus::Internal,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> RecallStatus) -> RecallStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(RecallStatus::Internal, "panic inside recall_ffi"),
    }
}

/// # Safety
/// `prompt` must point to `prompt_len` readable `u32`s (or be null when
/// `prompt_len` is 0); `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_new(
    prompt: *const u32,
    prompt_len: usize,
    r_start_id: u32,
    r_end_id: u32,
    vocab_size: usize,
    include_prior_spans: bool,
    include_delimiters: bool,
    out: *mut *mut RecallDecoder,
) -> RecallStatus {
    guard(|| {
        if out.is_null() || (prompt.is_null() && prompt_len > 0) {
            return fail(RecallStatus::NullPointer, "null pointer argument");
        }
        let raw: &[u32] = if prompt_len == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(prompt, prompt_len)
        };
        let cfg = DecoderConfig {
            include_prior_spans_in_context: include_prior_spans,
            include_delimiters_in_context: include_delimiters,
            ..DecoderConfig::new(r_start_id, r_end_id, vocab_size)
        };
        let tokens = raw.iter().map(|&t| TokenId(t)).collect();
        match GenerationState::new(tokens, cfg) {
            Ok(state) => {
                *out = Box::into_raw(Box::new(RecallDecoder { state }));
                RecallStatus::Ok
            }
            Err(DecodeError::Index(e)) => fail(RecallStatus::InvalidConfig, e.to_string()),
            Err(e) => decode_status(e),
        }
    })
}

/// # Safety
/// `dec` must come from [`recall_decoder_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_free(dec: *mut RecallDecoder) {
    if !dec.is_null() {
        drop(Box::from_raw(dec));
    }
}

unsafe fn handle<'a>(dec: *mut RecallDecoder) -> Result<&'a mut RecallDecoder, RecallStatus> {
    dec.as_mut()
        .ok_or_else(|| fail(RecallStatus::NullPointer, "null decoder handle"))
}

/// Feeds one sampled token. A rejected token leaves the state unchanged.
///
/// # Safety
/// `dec` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_observe(dec: *mut RecallDecoder, token: u32) -> RecallStatus {
    guard(|| match handle(dec) {
        Ok(d) => match d.state.observe_token(TokenId(token)) {
            Ok(()) => RecallStatus::Ok,
            Err(e) => decode_status(e),
        },
        Err(s) => s,
    })
}

/// Writes one byte per vocabulary entry (1 = allowed) into `out`.
///
/// # Safety
/// `dec` must be a live handle and `out` must point to `out_len` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_mask(dec: *mut RecallDecoder, out: *mut u8, out_len: usize) -> RecallStatus {
    guard(|| {
        let d = match handle(dec) {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(RecallStatus::NullPointer, "null output buffer");
        }
        let vocab = d.state.config().vocab_size;
        if out_len < vocab {
            return fail(
                RecallStatus::BufferTooSmall,
                format!("mask needs {vocab} bytes, buffer has {out_len}"),
            );
        }
        let mask = match d.state.next_token_mask() {
            Ok(m) => m,
            Err(e) => return decode_status(e),
        };
        let buf = std::slice::from_raw_parts_mut(out, vocab);
        for (b, allowed) in buf.iter_mut().zip(mask.to_bools()) {
            *b = allowed as u8;
        }
        RecallStatus::Ok
    })
}

/// Writes the mask as a little-endian packed bitset (bit `i` = token `i`)
/// into `out`, which needs `ceil(vocab_size / 8)` bytes.
///
/// # Safety
/// As for [`recall_decoder_mask`].
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_mask_bits(
    dec: *mut RecallDecoder,
    out: *mut u8,
    out_len: usize,
) -> RecallStatus {
    guard(|| {
        let d = match handle(dec) {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(RecallStatus::NullPointer, "null output buffer");
        }
        let mask = match d.state.next_token_mask() {
            Ok(m) => m,
            Err(e) => return decode_status(e),
        };
        let bytes = mask.to_bytes();
        if out_len < bytes.len() {
            return fail(
                RecallStatus::BufferTooSmall,
                format!("bitset needs {} bytes, buffer has {out_len}", bytes.len()),
            );
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
        RecallStatus::Ok
    })
}

/// Sets disallowed entries of `logits` to negative infinity in place.
/// Allowed entries are left bit-identical.
///
/// # Safety
/// `dec` must be a live handle and `logits` must point to `len` writable
/// floats.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_apply_mask(dec: *mut RecallDecoder, logits: *mut f32, len: usize) -> RecallStatus {
    guard(|| {
        let d = match handle(dec) {
            Ok(d) => d,
            Err(s) => return s,
        };
        if logits.is_null() {
            return fail(RecallStatus::NullPointer, "null logits buffer");
        }
        let mask = match d.state.next_token_mask() {
            Ok(m) => m,
            Err(e) => return decode_status(e),
        };
        let z = std::slice::from_raw_parts_mut(logits, len);
        match apply_mask_in_place(z, &mask) {
            Ok(()) => RecallStatus::Ok,
            Err(e) => decode_status(e),
        }
    })
}

/// # Safety
/// `dec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_mode(dec: *mut RecallDecoder, out: *mut i32) -> RecallStatus {
    guard(|| {
        let d = match handle(dec) {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(RecallStatus::NullPointer, "null output pointer");
        }
        *out = match d.state.mode() {
            Mode::Outside => RECALL_MODE_OUTSIDE,
            Mode::Inside => RECALL_MODE_INSIDE,
        };
        RecallStatus::Ok
    })
}

/// Number of spans: closed ones plus the open one, if any.
///
/// # Safety
/// `dec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_span_count(dec: *mut RecallDecoder, out: *mut usize) -> RecallStatus {
    guard(|| {
        let d = match handle(dec) {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(RecallStatus::NullPointer, "null output pointer");
        }
        *out = d.state.closed_spans().len() + usize::from(d.state.session().is_some());
        RecallStatus::Ok
    })
}

/// # Safety
/// `dec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_span_info(
    dec: *mut RecallDecoder,
    index: usize,
    out: *mut RecallSpanInfo,
) -> RecallStatus {
    guard(|| {
        let d = match handle(dec) {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(RecallStatus::NullPointer, "null output pointer");
        }
        let spans = d.state.extract_spans();
        let Some(s) = spans.get(index) else {
            return fail(RecallStatus::OutOfRange, format!("span {index} of {}", spans.len()));
        };
        *out = RecallSpanInfo {
            len: s.tokens.len(),
            gen_start: s.generation_interval.0,
            gen_end: s.generation_interval.1,
            snapshot_len: s.snapshot_len,
            n_positions: s.context_start_positions.len(),
            first_position: s.context_start_positions.first().copied().unwrap_or(usize::MAX),
            truncated: s.truncated,
        };
        RecallStatus::Ok
    })
}

/// Copies the tokens of span `index` into `out` and stores the span length
/// in `out_len`. When `cap` is too small nothing is copied, `out_len` still
/// receives the required length and `BufferTooSmall` is returned.
///
/// # Safety
/// `dec` must be a live handle, `out` must point to `cap` writable `u32`s
/// (may be null when `cap` is 0) and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn recall_decoder_span_tokens(
    dec: *mut RecallDecoder,
    index: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> RecallStatus {
    guard(|| {
        let d = match handle(dec) {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out_len.is_null() || (out.is_null() && cap > 0) {
            return fail(RecallStatus::NullPointer, "null output pointer");
        }
        let spans = d.state.extract_spans();
        let Some(s) = spans.get(index) else {
            return fail(RecallStatus::OutOfRange, format!("span {index} of {}", spans.len()));
        };
        *out_len = s.tokens.len();
        if cap < s.tokens.len() {
            return fail(
                RecallStatus::BufferTooSmall,
                format!("span has {} tokens, buffer holds {cap}", s.tokens.len()),
            );
        }
        for (i, t) in s.tokens.iter().enumerate() {
            *out.add(i) = t.0;
        }
        RecallStatus::Ok
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length in bytes
/// (excluding the terminator); 0 means no error has been recorded.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null with `cap` 0.
#[no_mangle]
pub unsafe extern "C" fn recall_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
