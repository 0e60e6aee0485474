//! C ABI for the causal sentence classifier.
//!
//! The surface is deliberately small: load a trained checkpoint with its
//! vocabulary into an opaque handle, classify UTF-8 sentences, free the
//! handle. Every fallible call returns a [`CausalStatus`]; the most recent
//! failure message is kept per thread and readable via
//! [`causal_last_error_message`].
//!
//! The C header is generated into `include/causal.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use causal_core::checkpoint::Checkpoint;
use causal_core::error::Error;
use causal_core::tokenizer::Vocabulary;
use causal_core::trainer;

/// Result codes for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Config = 6,
    /// The vocabulary does not match the checkpoint manifest.
    VocabMismatch = 7,
    CheckpointCorrupt = 8,
    Numeric = 9,
    Internal = 10,
}

fn status_of(err: &Error) -> CausalStatus {
    match err {
        Error::Io(_) => CausalStatus::Io,
        Error::Parse { .. } | Error::Csv(_) | Error::NoRecords => CausalStatus::Parse,
        Error::Shape(_) => CausalStatus::Shape,
        Error::Config(_) | Error::EmptyInput(_) => CausalStatus::Config,
        Error::VocabMismatch { .. } => CausalStatus::VocabMismatch,
        Error::Checkpoint(_) | Error::Json(_) => CausalStatus::CheckpointCorrupt,
        Error::Numeric(_) => CausalStatus::Numeric,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(err: &Error) -> CausalStatus {
    set_last_error(&err.to_string());
    status_of(err)
}

/// Loaded model: checkpoint parameters plus the vocabulary they were
/// trained with. Opaque across the ABI.
pub struct CausalModel {
    checkpoint: Checkpoint,
    vocab: Vocabulary,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn causal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn causal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, CausalStatus> {
    if ptr.is_null() {
        set_last_error(&format!("{name} is null"));
        return Err(CausalStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_last_error(&format!("{name} is not valid UTF-8"));
            Err(CausalStatus::InvalidUtf8)
        }
    }
}

/// Load a checkpoint directory and its vocabulary file into a new model.
///
/// On success, writes an owned handle to `out_model`; release it with
/// [`causal_model_free`]. The vocabulary is fingerprint-checked against the
/// checkpoint manifest.
///
/// # Safety
/// `checkpoint_dir` and `vocab_path` must be NUL-terminated strings and
/// `out_model` a valid pointer to pointer storage.
#[no_mangle]
pub unsafe extern "C" fn causal_model_load(
    checkpoint_dir: *const c_char,
    vocab_path: *const c_char,
    out_model: *mut *mut CausalModel,
) -> CausalStatus {
    if out_model.is_null() {
        set_last_error("out_model is null");
        return CausalStatus::NullArgument;
    }
    *out_model = ptr::null_mut();
    let dir = match cstr_arg(checkpoint_dir, "checkpoint_dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let vocab_file = match cstr_arg(vocab_path, "vocab_path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let checkpoint = match Checkpoint::load(dir) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let vocab = match Vocabulary::load(vocab_file, checkpoint.manifest.casing) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let found = vocab.fingerprint();
    if checkpoint.manifest.vocab_hash != found {
        return fail(&Error::VocabMismatch {
            expected: checkpoint.manifest.vocab_hash.clone(),
            found,
        });
    }
    *out_model = Box::into_raw(Box::new(CausalModel { checkpoint, vocab }));
    CausalStatus::Ok
}

/// Release a model returned by [`causal_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by [`causal_model_load`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn causal_model_free(model: *mut CausalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Classify one UTF-8 sentence.
///
/// Writes the causal-class probability to `out_p_causal` and the argmax
/// label (0 non-causal, 1 causal) to `out_label`. Either output pointer may
/// be null if the caller does not need that value.
///
/// # Safety
/// `model` must be a live handle from [`causal_model_load`] and `text` a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn causal_model_predict(
    model: *const CausalModel,
    text: *const c_char,
    out_p_causal: *mut f64,
    out_label: *mut i32,
) -> CausalStatus {
    if model.is_null() {
        set_last_error("model is null");
        return CausalStatus::NullArgument;
    }
    let text = match cstr_arg(text, "text") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let model = &*model;
    let items = [(String::new(), text.to_string())];
    let rows = match trainer::predict(
        &model.checkpoint.params,
        &model.vocab,
        &items,
        model.checkpoint.manifest.max_len,
    ) {
        Ok(rows) => rows,
        Err(e) => return fail(&e),
    };
    if !out_p_causal.is_null() {
        *out_p_causal = rows[0].p_causal;
    }
    if !out_label.is_null() {
        *out_label = i32::from(rows[0].label);
    }
    CausalStatus::Ok
}

/// Number of learnable parameters in the loaded model.
///
/// # Safety
/// `model` must be a live handle and `out_count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn causal_model_param_count(
    model: *const CausalModel,
    out_count: *mut usize,
) -> CausalStatus {
    if model.is_null() || out_count.is_null() {
        set_last_error("model or out_count is null");
        return CausalStatus::NullArgument;
    }
    *out_count = (*model).checkpoint.params.param_count();
    CausalStatus::Ok
}

/// Truncation length the model encodes sentences to.
///
/// # Safety
/// `model` must be a live handle and `out_max_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn causal_model_max_len(
    model: *const CausalModel,
    out_max_len: *mut usize,
) -> CausalStatus {
    if model.is_null() || out_max_len.is_null() {
        set_last_error("model or out_max_len is null");
        return CausalStatus::NullArgument;
    }
    *out_max_len = (*model).checkpoint.manifest.max_len;
    CausalStatus::Ok
}
