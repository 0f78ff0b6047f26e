// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `snrf-core`.
//!
//! Models and neuron sets are opaque heap handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns a
//! [`SnrfStatus`]; on failure the message is available from
//! [`snrf_last_error`] on the same thread until the next failing call.
//! Panics are caught at the boundary and reported as `SNRF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use snrf_core::merge::{self, MergeConfig, MergeMethod, SvdOrder};
use snrf_core::profile::{self, ImpactMode, Selector};
use snrf_core::{Error, ModelConfig, NeuronId, NeuronKind, NeuronSet, WeightMap};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Param = 3,
    Io = 4,
    Checkpoint = 5,
    Format = 6,
    Correspondence = 7,
    Numerical = 8,
    Panic = 9,
}

/// Neuron kind codes, in layer-module order.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrfNeuronKind {
    AttnQ = 0,
    AttnK = 1,
    AttnV = 2,
    FwdUp = 3,
    FwdDown = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrfImpactMode {
    LayerLocal = 0,
    FullModel = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrfMergeMethod {
    Snrf = 0,
    Linear = 1,
    Dare = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrfSvdOrder {
    FullThenMask = 0,
    MaskThenSvd = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SnrfModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_inter: usize,
    pub vocab: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnrfNeuron {
    pub layer: usize,
    /// A `SnrfNeuronKind` value.
    pub kind: u32,
    pub index: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SnrfOverlap {
    pub shared: usize,
    pub only_a: usize,
    pub only_b: usize,
    pub union_size: usize,
    pub shared_pct: f64,
    pub only_a_pct: f64,
    pub only_b_pct: f64,
}

/// Merge parameters for [`snrf_merge`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SnrfMergeParams {
    /// A `SnrfMergeMethod` value.
    pub method: u32,
    pub rank: usize,
    pub beta: f64,
    pub drop_prob: f64,
    pub seed: u64,
    /// A `SnrfSvdOrder` value.
    pub svd_order: u32,
    pub allow_beta_override: bool,
}

/// Opaque model handle.
pub struct SnrfModel(WeightMap);

/// Opaque neuron set handle.
pub struct SnrfNeuronSet(NeuronSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> SnrfStatus {
    match e {
        Error::Param(_) => SnrfStatus::Param,
        Error::Io { .. } => SnrfStatus::Io,
        Error::Checkpoint(_) => SnrfStatus::Checkpoint,
        Error::Format { .. } => SnrfStatus::Format,
        Error::Correspondence(_) => SnrfStatus::Correspondence,
        Error::NoConvergence { .. } => SnrfStatus::Numerical,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SnrfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SnrfStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            SnrfStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_last_error(format!("{what} is not valid UTF-8"));
            SnrfStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(format!("{}: {e}", e.category()));
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SnrfStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn c_path(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    c_str(p, what).map(PathBuf::from)
}

fn kind_to_c(k: NeuronKind) -> SnrfNeuronKind {
    match k {
        NeuronKind::AttnQ => SnrfNeuronKind::AttnQ,
        NeuronKind::AttnK => SnrfNeuronKind::AttnK,
        NeuronKind::AttnV => SnrfNeuronKind::AttnV,
        NeuronKind::FwdUp => SnrfNeuronKind::FwdUp,
        NeuronKind::FwdDown => SnrfNeuronKind::FwdDown,
    }
}

fn kind_from_c(k: u32) -> Result<NeuronKind, Failure> {
    NeuronKind::ALL.get(k as usize).copied().ok_or_else(|| Error::Param(format!("unknown neuron kind code {k}")).into())
}

fn code<T: Copy>(values: &[T], v: u32, what: &str) -> Result<T, Failure> {
    values.get(v as usize).copied().ok_or_else(|| Error::Param(format!("unknown {what} code {v}")).into())
}

/// Message of the last failing call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn snrf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn snrf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- models ----

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn snrf_model_load(path: *const c_char, out: *mut *mut SnrfModel) -> SnrfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let w = snrf_core::load_checkpoint(c_path(path, "path")?)?;
        *out = Box::into_raw(Box::new(SnrfModel(w)));
        Ok(())
    })
}

/// Creates a seeded random model.
///
/// # Safety
/// `config` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn snrf_model_random(
    config: *const SnrfModelConfig,
    seed: u64,
    out: *mut *mut SnrfModel,
) -> SnrfStatus {
    guard(|| {
        let c = borrow(config, "config")?;
        let out = out_ptr(out, "out")?;
        let cfg = ModelConfig { n_layers: c.n_layers, d_model: c.d_model, d_inter: c.d_inter, vocab: c.vocab };
        *out = Box::into_raw(Box::new(SnrfModel(WeightMap::random(cfg, seed)?)));
        Ok(())
    })
}

/// Writes the model to `path` atomically.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn snrf_model_save(model: *const SnrfModel, path: *const c_char) -> SnrfStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        snrf_core::save_checkpoint(&m.0, c_path(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn snrf_model_config(model: *const SnrfModel, out: *mut SnrfModelConfig) -> SnrfStatus {
    guard(|| {
        let c = borrow(model, "model")?.0.config();
        *out_ptr(out, "out")? =
            SnrfModelConfig { n_layers: c.n_layers, d_model: c.d_model, d_inter: c.d_inter, vocab: c.vocab };
        Ok(())
    })
}

/// Frees a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn snrf_model_free(model: *mut SnrfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Merges `src` into `tgt` into a new model in `*out`. `shared` is only read
/// by the SNRF method and may be null otherwise.
///
/// # Safety
/// Handles must come from this library; `shared` may be null unless the
/// method is SNRF.
#[no_mangle]
pub unsafe extern "C" fn snrf_merge(
    src: *const SnrfModel,
    tgt: *const SnrfModel,
    shared: *const SnrfNeuronSet,
    params: *const SnrfMergeParams,
    out: *mut *mut SnrfModel,
) -> SnrfStatus {
    guard(|| {
        let (s, t) = (borrow(src, "src")?, borrow(tgt, "tgt")?);
        let p = borrow(params, "params")?;
        let out = out_ptr(out, "out")?;
        let method = code(&[MergeMethod::Snrf, MergeMethod::Linear, MergeMethod::Dare], p.method, "merge method")?;
        let shared = match (method, shared.as_ref()) {
            (_, Some(set)) => set.0.clone(),
            (MergeMethod::Snrf, None) => return Err(Failure::Null("shared")),
            (_, None) => NeuronSet::new(),
        };
        let mut cfg = MergeConfig::snrf(shared, p.rank, p.beta);
        cfg.method = method;
        cfg.dare_drop_prob = p.drop_prob;
        cfg.seed = p.seed;
        cfg.svd_order = code(&[SvdOrder::FullThenMask, SvdOrder::MaskThenSvd], p.svd_order, "svd order")?;
        cfg.allow_beta_override = p.allow_beta_override;
        *out = Box::into_raw(Box::new(SnrfModel(merge::merge(&s.0, &t.0, &cfg)?)));
        Ok(())
    })
}

// ---- neuron sets ----

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_new(out: *mut *mut SnrfNeuronSet) -> SnrfStatus {
    guard(|| {
        *out_ptr(out, "out")? = Box::into_raw(Box::new(SnrfNeuronSet(NeuronSet::new())));
        Ok(())
    })
}

/// Reads a neuron set TSV.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_load(path: *const c_char, out: *mut *mut SnrfNeuronSet) -> SnrfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = NeuronSet::load(c_path(path, "path")?)?;
        *out = Box::into_raw(Box::new(SnrfNeuronSet(s)));
        Ok(())
    })
}

/// # Safety
/// `set` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_save(set: *const SnrfNeuronSet, path: *const c_char) -> SnrfStatus {
    guard(|| {
        borrow(set, "set")?.0.save(c_path(path, "path")?)?;
        Ok(())
    })
}

/// Number of neurons in the set; 0 for null.
///
/// # Safety
/// `set` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_len(set: *const SnrfNeuronSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// The `i`-th neuron in sorted order.
///
/// # Safety
/// `set` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_get(set: *const SnrfNeuronSet, i: usize, out: *mut SnrfNeuron) -> SnrfStatus {
    guard(|| {
        let s = &borrow(set, "set")?.0;
        let n = s
            .as_slice()
            .get(i)
            .ok_or_else(|| Error::Param(format!("index {i} out of range for set of {}", s.len())))?;
        *out_ptr(out, "out")? = SnrfNeuron { layer: n.layer, kind: kind_to_c(n.kind) as u32, index: n.index };
        Ok(())
    })
}

/// Adds a neuron; already-present neurons are ignored.
///
/// # Safety
/// `set` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_insert(set: *mut SnrfNeuronSet, neuron: SnrfNeuron) -> SnrfStatus {
    guard(|| {
        let s = out_ptr(set, "set")?;
        let n = NeuronId::new(neuron.layer, kind_from_c(neuron.kind)?, neuron.index);
        s.0 = s.0.iter().copied().chain(std::iter::once(n)).collect();
        Ok(())
    })
}

/// # Safety
/// `a`, `b` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_intersect(
    a: *const SnrfNeuronSet,
    b: *const SnrfNeuronSet,
    out: *mut *mut SnrfNeuronSet,
) -> SnrfStatus {
    guard(|| {
        let (a, b) = (borrow(a, "a")?, borrow(b, "b")?);
        *out_ptr(out, "out")? = Box::into_raw(Box::new(SnrfNeuronSet(profile::shared_neurons(&a.0, &b.0))));
        Ok(())
    })
}

/// # Safety
/// `a`, `b` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn snrf_overlap_stats(
    a: *const SnrfNeuronSet,
    b: *const SnrfNeuronSet,
    out: *mut SnrfOverlap,
) -> SnrfStatus {
    guard(|| {
        let s = profile::overlap_stats(&borrow(a, "a")?.0, &borrow(b, "b")?.0);
        *out_ptr(out, "out")? = SnrfOverlap {
            shared: s.shared,
            only_a: s.only_a,
            only_b: s.only_b,
            union_size: s.union,
            shared_pct: s.shared_pct,
            only_a_pct: s.only_a_pct,
            only_b_pct: s.only_b_pct,
        };
        Ok(())
    })
}

/// Frees a set. Null is ignored.
///
/// # Safety
/// `set` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn snrf_set_free(set: *mut SnrfNeuronSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Profiles every context in the corpus file and returns the neurons
/// selected in all of them. `selector` is `top:P` or `abs:T`; `mode` is a
/// `SnrfImpactMode` value.
///
/// # Safety
/// `model` must come from this library, strings be NUL-terminated and `out`
/// valid.
#[no_mangle]
pub unsafe extern "C" fn snrf_context_neurons(
    model: *const SnrfModel,
    corpus_path: *const c_char,
    selector: *const c_char,
    mode: u32,
    out: *mut *mut SnrfNeuronSet,
) -> SnrfStatus {
    guard(|| {
        let w = &borrow(model, "model")?.0;
        let out = out_ptr(out, "out")?;
        let corpus = snrf_core::checkpoint::load_corpus(c_path(corpus_path, "corpus_path")?, w.config())?;
        let sel: Selector = c_str(selector, "selector")?.parse()?;
        let mode = code(&[ImpactMode::LayerLocal, ImpactMode::FullModel], mode, "impact mode")?;
        *out = Box::into_raw(Box::new(SnrfNeuronSet(profile::context_neurons(w, &corpus, sel, mode)?)));
        Ok(())
    })
}
