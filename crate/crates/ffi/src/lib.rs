//! C ABI over the `malora` crate.
//!
//! Conventions shared by every function:
//!
//! - The return value is a [`MalkStatus`]; results come back through out-pointers.
//! - On failure, [`malk_last_error`] returns a message for the calling thread.
//! - Layers are opaque [`MalkLayer`] handles created by `malk_layer_new` or
//!   `malk_layer_load` and released with `malk_layer_free`.
//! - Matrices are row-major `double` buffers.
//! - Configs are the same JSON documents the `malk` CLI reads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use malora::adapters::Mode;
use malora::autodiff::Tape;
use malora::cli::{layer_checkpoint, load_checkpoint, restore_layer, save_checkpoint, RunConfig};
use malora::moe::{bound_ratio, derive_geometry, flop_budget, param_budget, AdapterLayer, Site};
use malora::{Error, Matrix, Rng};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MalkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Shape = 4,
    RankDeficient = 5,
    Config = 6,
    Diverged = 7,
    Format = 8,
    Schema = 9,
    UnsupportedMethod = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for MalkStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::NotScalarLoss { .. } => MalkStatus::InvalidInput,
            Error::Shape { .. } => MalkStatus::Shape,
            Error::RankDeficient { .. } => MalkStatus::RankDeficient,
            Error::Config(_) => MalkStatus::Config,
            Error::Diverged { .. } => MalkStatus::Diverged,
            Error::Format { .. } => MalkStatus::Format,
            Error::Schema(_) => MalkStatus::Schema,
            Error::UnsupportedMethod(_) => MalkStatus::UnsupportedMethod,
            Error::Io(_) => MalkStatus::Io,
        }
    }
}

/// One adapted linear site, `out_dim × in_dim`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MalkSite {
    pub out_dim: u64,
    pub in_dim: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MalkBudget {
    /// Trainable adapter scalars, router included.
    pub trainable: u64,
    /// Frozen adapter scalars (e.g. the fixed down-projection of AsyLoRA).
    pub frozen: u64,
    /// Router scalars, a subset of `trainable`.
    pub router: u64,
}

/// Opaque adapter layer together with the config that built it.
pub struct MalkLayer {
    config: RunConfig,
    layer: AdapterLayer,
}

struct Failure(MalkStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MalkStatus::from(&e), e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|e| {
        let mut bytes = e.into_vec();
        bytes.retain(|b| *b != 0);
        CString::new(bytes).expect("interior NULs removed")
    });
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, records its error (or panic) and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MalkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            MalkStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MalkStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MalkStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(MalkStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn layer_arg<'a>(p: *const MalkLayer) -> Result<&'a MalkLayer, Failure> {
    p.as_ref().ok_or_else(|| null("layer"))
}

unsafe fn sites_arg(sites: *const MalkSite, n_sites: usize) -> Result<Vec<Site>, Failure> {
    if n_sites == 0 {
        return Ok(Vec::new());
    }
    if sites.is_null() {
        return Err(null("sites"));
    }
    Ok(std::slice::from_raw_parts(sites, n_sites).iter().map(|s| Site::new(s.out_dim, s.in_dim)).collect())
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn malk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn malk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Shared and expanded ranks for base rank `rank`, `n_experts` experts and split `lambda`.
///
/// # Safety
/// `shared_rank` and `expanded_rank` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn malk_derive_geometry(
    rank: usize,
    n_experts: usize,
    lambda: f64,
    shared_rank: *mut usize,
    expanded_rank: *mut usize,
) -> MalkStatus {
    guard(|| {
        let d = out_arg(shared_rank, "shared_rank")?;
        let r_bar = out_arg(expanded_rank, "expanded_rank")?;
        let g = derive_geometry(rank, n_experts, lambda)?;
        *d = g.shared_rank;
        *r_bar = g.expanded_rank;
        Ok(())
    })
}

/// Generalization-bound ratio `sqrt(expanded_rank / rank)`.
///
/// # Safety
/// `ratio` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn malk_bound_ratio(expanded_rank: usize, rank: usize, ratio: *mut f64) -> MalkStatus {
    guard(|| {
        *out_arg(ratio, "ratio")? = bound_ratio(expanded_rank, rank)?;
        Ok(())
    })
}

/// Parameter counts of the adapter in `config_json` over `n_sites` sites.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `sites` must point to
/// `n_sites` readable entries (it may be NULL when `n_sites` is 0) and `out`
/// must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn malk_param_budget(
    config_json: *const c_char,
    sites: *const MalkSite,
    n_sites: usize,
    out: *mut MalkBudget,
) -> MalkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config = RunConfig::from_json(str_arg(config_json, "config_json")?)?;
        let b = param_budget(&config.adapter.method_spec()?, &sites_arg(sites, n_sites)?)?;
        *out = MalkBudget { trainable: b.trainable, frozen: b.frozen, router: b.router };
        Ok(())
    })
}

/// Forward multiply-adds of the adapter path for a batch of `batch` rows.
///
/// # Safety
/// Same pointer rules as [`malk_param_budget`]; `per_row` and `total` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn malk_flop_budget(
    config_json: *const c_char,
    sites: *const MalkSite,
    n_sites: usize,
    batch: u64,
    per_row: *mut u64,
    total: *mut u64,
) -> MalkStatus {
    guard(|| {
        let per_row = out_arg(per_row, "per_row")?;
        let total = out_arg(total, "total")?;
        let config = RunConfig::from_json(str_arg(config_json, "config_json")?)?;
        let f = flop_budget(&config.adapter.method_spec()?, &sites_arg(sites, n_sites)?, batch)?;
        *per_row = f.per_row;
        *total = f.total;
        Ok(())
    })
}

/// Builds a freshly initialized layer over the frozen `out_dim × in_dim` weight `base_w`.
///
/// `seed` replaces the config's run seed and drives initialization.
///
/// # Safety
/// `config_json` must be NUL-terminated, `base_w` must point to
/// `out_dim * in_dim` readable doubles and `out` must be valid for writes.
/// On success `*out` owns a handle that must be released with [`malk_layer_free`].
#[no_mangle]
pub unsafe extern "C" fn malk_layer_new(
    config_json: *const c_char,
    base_w: *const f64,
    out_dim: usize,
    in_dim: usize,
    seed: u64,
    out: *mut *mut MalkLayer,
) -> MalkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut config = RunConfig::from_json(str_arg(config_json, "config_json")?)?;
        if base_w.is_null() {
            return Err(null("base_w"));
        }
        let len =
            out_dim.checked_mul(in_dim).ok_or_else(|| Failure(MalkStatus::InvalidInput, "dims overflow".into()))?;
        let base = Matrix::from_vec(out_dim, in_dim, std::slice::from_raw_parts(base_w, len).to_vec())?;
        config.seed = seed;
        let layer = AdapterLayer::build(base, &config.adapter, &mut Rng::new(seed))?;
        *out = Box::into_raw(Box::new(MalkLayer { config, layer }));
        Ok(())
    })
}

/// Loads a layer from a `malk` checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid for writes. On success `*out`
/// must be released with [`malk_layer_free`].
#[no_mangle]
pub unsafe extern "C" fn malk_layer_load(path: *const c_char, out: *mut *mut MalkLayer) -> MalkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        let (config, layer) = restore_layer(&ckpt)?;
        *out = Box::into_raw(Box::new(MalkLayer { config, layer }));
        Ok(())
    })
}

/// Writes `layer` to `path` in the checkpoint format, atomically.
///
/// # Safety
/// `layer` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn malk_layer_save(layer: *const MalkLayer, path: *const c_char) -> MalkStatus {
    guard(|| {
        let h = layer_arg(layer)?;
        save_checkpoint(Path::new(str_arg(path, "path")?), &layer_checkpoint(&h.config, &h.layer))?;
        Ok(())
    })
}

/// Output dim, input dim and expert count of `layer` (1 for single-adapter methods).
///
/// # Safety
/// `layer` must be a live handle; the out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn malk_layer_dims(
    layer: *const MalkLayer,
    out_dim: *mut usize,
    in_dim: *mut usize,
    n_experts: *mut usize,
) -> MalkStatus {
    guard(|| {
        let h = layer_arg(layer)?;
        *out_arg(out_dim, "out_dim")? = h.layer.out_dim();
        *out_arg(in_dim, "in_dim")? = h.layer.in_dim();
        *out_arg(n_experts, "n_experts")? = h.layer.n_experts();
        Ok(())
    })
}

/// Number of trainable scalars, router included.
///
/// # Safety
/// `layer` must be a live handle and `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn malk_layer_trainable_count(layer: *const MalkLayer, count: *mut u64) -> MalkStatus {
    guard(|| {
        *out_arg(count, "count")? = layer_arg(layer)?.layer.trainable_count() as u64;
        Ok(())
    })
}

/// Inference forward pass: `y = x·(W + ΔW)ᵀ` with routing, no dropout.
///
/// `x` holds `rows × in_dim` doubles; `y` receives `rows × out_dim` and has
/// room for `y_len` doubles.
///
/// # Safety
/// `layer` must be a live handle, `x` must point to `rows * in_dim` readable
/// doubles and `y` to `y_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn malk_layer_forward(
    layer: *const MalkLayer,
    x: *const f64,
    rows: usize,
    y: *mut f64,
    y_len: usize,
) -> MalkStatus {
    guard(|| {
        let h = layer_arg(layer)?;
        let (n, m) = (h.layer.in_dim(), h.layer.out_dim());
        if x.is_null() {
            return Err(null("x"));
        }
        if y.is_null() {
            return Err(null("y"));
        }
        let need = rows.checked_mul(m).ok_or_else(|| Failure(MalkStatus::InvalidInput, "rows overflow".into()))?;
        if y_len < need {
            return Err(Failure(MalkStatus::BufferTooSmall, format!("y holds {y_len} doubles, need {need}")));
        }
        let xm = Matrix::from_vec(rows, n, std::slice::from_raw_parts(x, rows * n).to_vec())?;
        let mut tape = Tape::new();
        let xv = tape.constant(&xm);
        let o = h.layer.forward(&mut tape, xv, &mut Mode::Eval)?;
        std::slice::from_raw_parts_mut(y, need).copy_from_slice(tape.value(o.y).data());
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `layer` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn malk_layer_free(layer: *mut MalkLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}
