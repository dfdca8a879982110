//! C ABI over the `dwcrf` library.
//!
//! Every function returns a [`DwcrfStatus`]; on failure the message is available from
//! [`dwcrf_last_error`] on the same thread. Handles are opaque and must be released with
//! their `_free` function. Observation matrices are row-major `f64` arrays, one row per
//! position.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dwcrf::inference::{compute_potentials, forward_backward, stream_update};
use dwcrf::model::{deserialize_model, load_model, save_model, serialize_model, ModelBundle};
use dwcrf::trainer::{train, Decoder};
use dwcrf::{Error, LabelAlphabet, LabeledSequence, Method, StreamState, TrainingConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DwcrfStatus {
    Ok = 0,
    NullPointer = 1,
    Contract = 2,
    Dimension = 3,
    Invariant = 4,
    Parse = 5,
    Config = 6,
    Io = 7,
    Refused = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

pub const DWCRF_DECODER_MARGINAL: i32 = 0;
pub const DWCRF_DECODER_VITERBI: i32 = 1;
pub const DWCRF_DECODER_STREAM: i32 = 2;

pub const DWCRF_METHOD_CRF: i32 = 0;
pub const DWCRF_METHOD_FWCRF: i32 = 1;
pub const DWCRF_METHOD_DWCRF: i32 = 2;

/// A trained model with its label alphabet and feature standardization.
pub struct DwcrfModel {
    bundle: ModelBundle,
    class_names: Vec<CString>,
}

/// Forward-only decoder state bound to a copy of a model.
pub struct DwcrfStream {
    bundle: ModelBundle,
    state: StreamState,
}

/// Training options. Start from [`dwcrf_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DwcrfTrainOptions {
    /// One of the `DWCRF_METHOD_*` constants.
    pub method: i32,
    pub theta: f64,
    /// Warm-up evaluations before dynamic weights; negative means never switch.
    pub tau: i64,
    pub beta: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub history_size: usize,
    pub seed: u64,
    pub standardize: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

#[derive(Debug)]
struct Failure(DwcrfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => DwcrfStatus::Contract,
            Error::Dimension { .. } => DwcrfStatus::Dimension,
            Error::Invariant { .. } => DwcrfStatus::Invariant,
            Error::Parse { .. } => DwcrfStatus::Parse,
            Error::Refused(_) => DwcrfStatus::Refused,
            Error::Config(_) => DwcrfStatus::Config,
            Error::Io { .. } => DwcrfStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn size(a: usize, b: usize) -> Result<usize, Failure> {
    a.checked_mul(b)
        .ok_or_else(|| Failure(DwcrfStatus::Contract, "buffer size overflows".into()))
}

fn null(what: &str) -> Failure {
    Failure(DwcrfStatus::NullPointer, format!("{what} is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DwcrfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DwcrfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DwcrfStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(DwcrfStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const DwcrfModel) -> Result<&'a DwcrfModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn wrap(bundle: ModelBundle) -> *mut DwcrfModel {
    let class_names = bundle
        .alphabet
        .names()
        .iter()
        .map(|n| CString::new(n.replace('\0', " ")).expect("nul bytes removed"))
        .collect();
    Box::into_raw(Box::new(DwcrfModel { bundle, class_names }))
}

/// Standardized rows of a `t x d` row-major matrix.
fn rows_of(bundle: &ModelBundle, obs: &[f64], t: usize) -> Vec<Vec<f64>> {
    let d = bundle.params.num_features();
    (0..t)
        .map(|s| {
            let x = &obs[s * d..(s + 1) * d];
            match &bundle.standardizer {
                Some(st) => st.transform(x),
                None => x.to_vec(),
            }
        })
        .collect()
}

/// Message of the most recent failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn dwcrf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dwcrf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model document from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_load(path: *const c_char, out: *mut *mut DwcrfModel) -> DwcrfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        *out = wrap(load_model(path_arg(path)?)?);
        Ok(())
    })
}

/// Parses a model document held in memory.
///
/// # Safety
/// `json` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_from_json(json: *const u8, len: usize, out: *mut *mut DwcrfModel) -> DwcrfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        *out = wrap(deserialize_model(slice_arg(json, len, "json")?)?);
        Ok(())
    })
}

/// Writes the model document to `path`.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_save(model: *const DwcrfModel, path: *const c_char) -> DwcrfStatus {
    guard(|| Ok(save_model(&model_ref(model)?.bundle, path_arg(path)?)?))
}

/// Serializes the model into a newly allocated NUL-terminated string. Release it with
/// [`dwcrf_string_free`].
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_to_json(model: *const DwcrfModel, out: *mut *mut c_char) -> DwcrfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let doc = serialize_model(&model_ref(model)?.bundle)?;
        let text = CString::new(doc).map_err(|_| Failure(DwcrfStatus::Invariant, "document holds a NUL byte".into()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`dwcrf_model_to_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_free(model: *mut DwcrfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null model.
///
/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_num_classes(model: *const DwcrfModel) -> usize {
    model.as_ref().map_or(0, |m| m.bundle.params.num_classes())
}

/// Number of input features, or 0 for a null model.
///
/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_num_features(model: *const DwcrfModel) -> usize {
    model.as_ref().map_or(0, |m| m.bundle.params.num_features())
}

/// Name of class `k`, owned by the model; null when out of range.
///
/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_class_name(model: *const DwcrfModel, k: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.class_names.get(k))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Labels a `t x num_features` observation matrix. `decoder` is a `DWCRF_DECODER_*` constant.
///
/// # Safety
/// `obs` must hold `t * num_features` doubles and `labels_out` room for `t` entries.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_predict(
    model: *const DwcrfModel,
    obs: *const f64,
    t: usize,
    decoder: i32,
    labels_out: *mut usize,
) -> DwcrfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let decoder = match decoder {
            DWCRF_DECODER_MARGINAL => Decoder::Marginal,
            DWCRF_DECODER_VITERBI => Decoder::Viterbi,
            DWCRF_DECODER_STREAM => Decoder::Stream,
            other => return Err(Failure(DwcrfStatus::Config, format!("unknown decoder {other}"))),
        };
        let d = m.bundle.params.num_features();
        let obs = slice_arg(obs, size(t, d)?, "obs")?;
        let out = slice_out(labels_out, t, "labels_out")?;
        let labels = dwcrf::trainer::decode(&m.bundle.params, &rows_of(&m.bundle, obs, t), decoder)?;
        out.copy_from_slice(&labels);
        Ok(())
    })
}

/// Per-position posterior marginals, written row-major into a `t x num_classes` buffer.
///
/// # Safety
/// `obs` must hold `t * num_features` doubles and `out` room for `t * num_classes`.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_model_marginals(
    model: *const DwcrfModel,
    obs: *const f64,
    t: usize,
    out: *mut f64,
    log_partition_out: *mut f64,
) -> DwcrfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let k = m.bundle.params.num_classes();
        let obs = slice_arg(obs, size(t, m.bundle.params.num_features())?, "obs")?;
        let out = slice_out(out, size(t, k)?, "out")?;
        let pot = compute_potentials(&rows_of(&m.bundle, obs, t), &m.bundle.params)?;
        let (unary, _) = forward_backward(&pot)?;
        for (s, row) in unary.rows().enumerate() {
            out[s * k..(s + 1) * k].copy_from_slice(row);
        }
        if let Some(z) = log_partition_out.as_mut() {
            *z = unary.log_partition;
        }
        Ok(())
    })
}

/// Starts a forward-only decoder over a copy of `model`.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_stream_new(model: *const DwcrfModel, out: *mut *mut DwcrfStream) -> DwcrfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let bundle = model_ref(model)?.bundle.clone();
        let state = StreamState::new(bundle.params.num_classes());
        *out = Box::into_raw(Box::new(DwcrfStream { bundle, state }));
        Ok(())
    })
}

/// Consumes one observation of `num_features` doubles. Writes the predicted label, and the
/// normalized message when `message_out` (room for `num_classes`) is not null.
///
/// # Safety
/// `stream` must come from this library and `x` hold `num_features` doubles.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_stream_update(
    stream: *mut DwcrfStream,
    x: *const f64,
    label_out: *mut usize,
    message_out: *mut f64,
) -> DwcrfStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        let d = s.bundle.params.num_features();
        let x = slice_arg(x, d, "x")?;
        let row = rows_of(&s.bundle, x, 1).pop().expect("one row");
        let (next, label, message) = stream_update(&s.state, &row, &s.bundle.params)?;
        s.state = next;
        if let Some(l) = label_out.as_mut() {
            *l = label;
        }
        if !message_out.is_null() {
            std::slice::from_raw_parts_mut(message_out, message.len()).copy_from_slice(&message);
        }
        Ok(())
    })
}

/// Forgets all consumed observations.
///
/// # Safety
/// `stream` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_stream_reset(stream: *mut DwcrfStream) -> DwcrfStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        s.state = StreamState::new(s.bundle.params.num_classes());
        Ok(())
    })
}

/// # Safety
/// `stream` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_stream_free(stream: *mut DwcrfStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

#[no_mangle]
pub extern "C" fn dwcrf_train_options_default() -> DwcrfTrainOptions {
    let c = TrainingConfig::default();
    DwcrfTrainOptions {
        method: DWCRF_METHOD_DWCRF,
        theta: c.theta,
        tau: c.tau.map_or(-1, |t| t as i64),
        beta: c.beta,
        max_iterations: c.max_iterations,
        tolerance: c.convergence_tol,
        history_size: c.history_size,
        seed: c.seed,
        standardize: c.standardize,
    }
}

fn config_of(o: &DwcrfTrainOptions) -> Result<TrainingConfig, Failure> {
    let method = match o.method {
        DWCRF_METHOD_CRF => Method::PlainCrf,
        DWCRF_METHOD_FWCRF => Method::Fwcrf,
        DWCRF_METHOD_DWCRF => Method::Dwcrf,
        other => return Err(Failure(DwcrfStatus::Config, format!("unknown method {other}"))),
    };
    Ok(TrainingConfig {
        method,
        theta: o.theta,
        tau: u64::try_from(o.tau).ok(),
        beta: o.beta,
        max_iterations: o.max_iterations,
        convergence_tol: o.tolerance,
        history_size: o.history_size,
        seed: o.seed,
        standardize: o.standardize,
    })
}

/// Trains on `num_sequences` sequences laid end to end: `obs` holds `sum(lengths) x dim`
/// doubles, `labels` holds `sum(lengths)` class indices below `num_classes`. `options` may be
/// null for defaults. `converged_out` may be null.
///
/// # Safety
/// All buffers must have the sizes stated above; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dwcrf_train(
    obs: *const f64,
    labels: *const usize,
    lengths: *const usize,
    num_sequences: usize,
    dim: usize,
    num_classes: usize,
    options: *const DwcrfTrainOptions,
    out: *mut *mut DwcrfModel,
    converged_out: *mut bool,
) -> DwcrfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let lengths = slice_arg(lengths, num_sequences, "lengths")?;
        let total = lengths
            .iter()
            .try_fold(0usize, |acc, &l| acc.checked_add(l))
            .ok_or_else(|| Failure(DwcrfStatus::Contract, "sequence lengths overflow".into()))?;
        let obs = slice_arg(obs, size(total, dim)?, "obs")?;
        let labels = slice_arg(labels, total, "labels")?;
        let config = config_of(&options.as_ref().copied().unwrap_or_else(|| dwcrf_train_options_default()))?;
        let mut sequences = Vec::with_capacity(num_sequences);
        let mut start = 0;
        for (i, &len) in lengths.iter().enumerate() {
            let rows = (start..start + len).map(|t| obs[t * dim..(t + 1) * dim].to_vec()).collect();
            sequences.push(LabeledSequence::from_rows(
                format!("seq-{i}"),
                rows,
                labels[start..start + len].to_vec(),
                num_classes,
            )?);
            start += len;
        }
        let alphabet = LabelAlphabet::numbered(num_classes)?;
        let model = train(&sequences, &alphabet, &config)?;
        if let Some(c) = converged_out.as_mut() {
            *c = model.converged;
        }
        let names = (1..=dim).map(|j| format!("f{j}")).collect();
        *out = wrap(model.to_bundle(names));
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_status() {
        let status = guard(|| Err(Error::Config("x".into()).into()));
        assert_eq!(status, DwcrfStatus::Config);
        let msg = unsafe { CStr::from_ptr(dwcrf_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "configuration error: x");
        assert_eq!(guard(|| Ok(())), DwcrfStatus::Ok);
        assert!(dwcrf_last_error().is_null());
    }

    #[test]
    fn panics_are_contained() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, DwcrfStatus::Panic);
    }

    #[test]
    fn default_options_round_trip() {
        let c = config_of(&dwcrf_train_options_default()).unwrap();
        let d = TrainingConfig::default();
        assert_eq!((c.theta, c.tau, c.max_iterations), (d.theta, d.tau, d.max_iterations));
        assert_eq!(c.method, Method::Dwcrf);
    }
}
