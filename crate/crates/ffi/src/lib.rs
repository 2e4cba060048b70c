//! C ABI over the rankforge engine.
//!
//! Every function returns an [`RfStatus`]. On failure the message is kept
//! per thread and can be fetched with [`rf_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rankforge::checkpoint::{hash_text, Checkpoint};
use rankforge::costmodel::{CostModel, CostSource, LatencyTable};
use rankforge::netspec::{desk_cnn, resnet18};
use rankforge::nn::{BackwardOptions, Dataset, ForwardPass, Gradients, Network, Route};
use rankforge::rankspace::{build_rank_space, CompressionTarget};
use rankforge::report::{compress, parse_ranks};
use rankforge::search::{SearchConfig, SearchContext, SearchState};
use rankforge::{ConvLayerSpec, Error, Tensor4};

/// Status codes. Zero is success; everything else is an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    CostResolution = 5,
    /// Call order violated, e.g. backward before forward.
    State = 6,
    Parse = 7,
    Data = 8,
    Io = 9,
    /// Output buffer too small; the needed size was still written.
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for RfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Argument(_) => RfStatus::InvalidArgument,
            Error::Shape(_) => RfStatus::Shape,
            Error::NotConverged { .. } | Error::Numeric(_) => RfStatus::Numeric,
            Error::CostResolution { .. } => RfStatus::CostResolution,
            Error::State(_) => RfStatus::State,
            Error::Parse { .. } => RfStatus::Parse,
            Error::Data(_) => RfStatus::Data,
            Error::Io { .. } => RfStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(RfStatus::from(&e), e.to_string())
    }
}

fn fail(status: RfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(RfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(RfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(RfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    handle_mut(p, what)
}

/// Copies `text` plus a NUL into `buf`. `needed` always receives the full size.
unsafe fn copy_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    let n = text.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return Err(fail(RfStatus::BufferTooSmall, format!("need {n} bytes, have {cap}")));
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

/// Opaque network handle. Holds the last forward pass and gradients.
pub struct RfNetwork {
    net: Network,
    pass: Option<ForwardPass>,
    grads: Option<Gradients>,
}

impl RfNetwork {
    fn boxed(net: Network) -> *mut RfNetwork {
        Box::into_raw(Box::new(RfNetwork {
            net,
            pass: None,
            grads: None,
        }))
    }
}

/// Opaque search handle.
pub struct RfSearch {
    dense: Network,
    cost: CostModel,
    data: Dataset,
    state: SearchState,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf`. Writes an
/// empty string when the last call succeeded.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn rf_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> RfStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.to_string_lossy().into_owned()));
    let msg = msg.unwrap_or_default();
    let n = msg.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return RfStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, msg.len());
    *buf.add(msg.len()) = 0;
    RfStatus::Ok
}

/// Freshly initialized built-in network: `"desk"` or `"resnet18"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_network_builtin(
    name: *const c_char,
    classes: usize,
    seed: u64,
    out: *mut *mut RfNetwork,
) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = match str_arg(name, "name")? {
            "desk" => desk_cnn(classes),
            "resnet18" => resnet18(),
            other => return Err(fail(RfStatus::InvalidArgument, format!("unknown network `{other}`"))),
        };
        *out = RfNetwork::boxed(Network::init(spec, seed)?);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_network_load(path: *const c_char, out: *mut *mut RfNetwork) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        *out = RfNetwork::boxed(Network::read_from(&Checkpoint::load(&path)?)?);
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rf_network_save(net: *const RfNetwork, path: *const c_char) -> RfStatus {
    guard(|| {
        let h = handle(net, "net")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let mut c = Checkpoint::new(hash_text(&h.net.spec.to_text()));
        h.net.write_to(&mut c);
        c.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library or be null. Double frees are undefined.
#[no_mangle]
pub unsafe extern "C" fn rf_network_free(net: *mut RfNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input shape `(C, H, W)` and number of classes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_network_shape(
    net: *const RfNetwork,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> RfStatus {
    guard(|| {
        let h = handle(net, "net")?;
        let (c, hh, w) = h.net.spec.input;
        *out_ptr(channels, "channels")? = c;
        *out_ptr(height, "height")? = hh;
        *out_ptr(width, "width")? = w;
        *out_ptr(classes, "classes")? = h.net.spec.classes;
        Ok(())
    })
}

/// # Safety
/// `net` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_network_num_params(net: *const RfNetwork, out: *mut u64) -> RfStatus {
    guard(|| {
        let h = handle(net, "net")?;
        *out_ptr(out, "out")? = h.net.num_params() as u64;
        Ok(())
    })
}

/// Forward pass over `batch` NCHW samples. Writes `batch * classes` logits.
/// Searched layers use their probability-weighted mixture.
///
/// # Safety
/// `input` must hold `batch * C * H * W` values; `logits` `cap` values.
#[no_mangle]
pub unsafe extern "C" fn rf_network_forward(
    net: *mut RfNetwork,
    input: *const f64,
    batch: usize,
    logits: *mut f64,
    cap: usize,
) -> RfStatus {
    guard(|| {
        let h = handle_mut(net, "net")?;
        if input.is_null() || logits.is_null() {
            return Err(fail(RfStatus::NullPointer, "input or logits is null"));
        }
        if batch == 0 {
            return Err(fail(RfStatus::InvalidArgument, "batch must be positive"));
        }
        let (c, hh, w) = h.net.spec.input;
        let classes = h.net.spec.classes;
        if cap < batch * classes {
            return Err(fail(
                RfStatus::BufferTooSmall,
                format!("logits need {} values, have {cap}", batch * classes),
            ));
        }
        let x = std::slice::from_raw_parts(input, batch * c * hh * w).to_vec();
        let x = Tensor4::new([batch, c, hh, w], x)?;
        let route = if h.net.num_choice_layers() > 0 {
            Route::Expectation
        } else {
            Route::Path(&[])
        };
        let pass = h.net.forward(&x, route)?;
        std::slice::from_raw_parts_mut(logits, batch * classes).copy_from_slice(pass.logits().data());
        h.pass = Some(pass);
        h.grads = None;
        Ok(())
    })
}

/// Backpropagates `grad_logits` (same layout as the last forward's logits).
/// Fails with `State` when no forward pass is pending.
///
/// # Safety
/// `grad_logits` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn rf_network_backward(net: *mut RfNetwork, grad_logits: *const f64, len: usize) -> RfStatus {
    guard(|| {
        let h = handle_mut(net, "net")?;
        let pass = h
            .pass
            .as_ref()
            .ok_or_else(|| fail(RfStatus::State, "backward called before forward"))?;
        if grad_logits.is_null() {
            return Err(fail(RfStatus::NullPointer, "grad_logits is null"));
        }
        let shape = pass.logits().shape();
        if len != shape.iter().product::<usize>() {
            return Err(fail(RfStatus::Shape, format!("expected {} logit gradients, got {len}", shape.iter().product::<usize>())));
        }
        let g = Tensor4::new(shape, std::slice::from_raw_parts(grad_logits, len).to_vec())?;
        let grads = h.net.backward(pass, &g, &BTreeMap::new(), BackwardOptions::default())?;
        h.grads = Some(grads);
        Ok(())
    })
}

/// Plain gradient step `p -= lr * g` with the gradients of the last
/// backward. Fails with `State` when there are none.
///
/// # Safety
/// `net` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_network_apply_gradients(net: *mut RfNetwork, lr: f64) -> RfStatus {
    guard(|| {
        let h = handle_mut(net, "net")?;
        let grads = h
            .grads
            .take()
            .ok_or_else(|| fail(RfStatus::State, "no gradients: call backward first"))?;
        if !lr.is_finite() {
            return Err(fail(RfStatus::InvalidArgument, "lr must be finite"));
        }
        for (name, p) in h.net.params_mut() {
            if let Some(g) = grads.params.get(&name) {
                for (w, d) in p.iter_mut().zip(g) {
                    *w -= lr * d;
                }
            }
        }
        h.pass = None;
        Ok(())
    })
}

/// Tucker-2 compresses every searched layer at the ranks in `ranks_csv`
/// (`layer_id,r1,r2` lines). The source network is left untouched.
///
/// # Safety
/// `net`, `ranks_csv` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_network_compress(
    net: *const RfNetwork,
    ranks_csv: *const c_char,
    refine_iters: usize,
    out: *mut *mut RfNetwork,
) -> RfStatus {
    guard(|| {
        let h = handle(net, "net")?;
        let out = out_ptr(out, "out")?;
        let ranks = parse_ranks(str_arg(ranks_csv, "ranks_csv")?, "<ranks>")?;
        let (compressed, _) = compress(&h.net, &ranks, refine_iters)?;
        *out = RfNetwork::boxed(compressed);
        Ok(())
    })
}

/// Candidate rank pairs of one conv layer at compression ratio `alpha`.
/// `len` receives the count even when the buffers are too small.
///
/// # Safety
/// `r1` and `r2` must hold `cap` values each; `len` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rf_rank_candidates(
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    alpha: f64,
    r1: *mut usize,
    r2: *mut usize,
    cap: usize,
    len: *mut usize,
) -> RfStatus {
    guard(|| {
        let len = out_ptr(len, "len")?;
        let spec = ConvLayerSpec::new("layer", out_channels, in_channels, (kernel_h, kernel_w), 1, kernel_h / 2)?;
        let plan = build_rank_space(&[spec], CompressionTarget::new(alpha)?)?;
        let cands = &plan.layers[0].candidates;
        *len = cands.len();
        if cap < cands.len() || r1.is_null() || r2.is_null() {
            return Err(fail(RfStatus::BufferTooSmall, format!("need {} slots, have {cap}", cands.len())));
        }
        for (i, c) in cands.iter().enumerate() {
            *r1.add(i) = c.r1;
            *r2.add(i) = c.r2;
        }
        Ok(())
    })
}

/// Starts a rank search from a dense network.
///
/// `labels_path` is only for IDX data. A null `table_path` prices ranks by
/// FLOPs. `config_json` (nullable) overrides fields of the default search
/// configuration, e.g. `{"budget": 0.6, "epochs": 10}`.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn rf_search_new(
    dense: *const RfNetwork,
    data_path: *const c_char,
    labels_path: *const c_char,
    table_path: *const c_char,
    alpha: f64,
    config_json: *const c_char,
    out: *mut *mut RfSearch,
) -> RfStatus {
    guard(|| {
        let dense = handle(dense, "dense")?.net.clone();
        let out = out_ptr(out, "out")?;
        let data_path = PathBuf::from(str_arg(data_path, "data_path")?);
        let labels = opt_str_arg(labels_path, "labels_path")?.map(PathBuf::from);
        let data = Dataset::load(&data_path, labels.as_deref())?;
        let geoms = dense.spec.geometries()?;
        let source = match opt_str_arg(table_path, "table_path")? {
            Some(t) => CostSource::Table(LatencyTable::load(&PathBuf::from(t))?),
            None => CostSource::FlopsProxy {
                scale: rankforge::cli::FLOPS_PROXY_SCALE,
            },
        };
        let cost = CostModel::new(source, geoms);
        let cfg = match opt_str_arg(config_json, "config_json")? {
            None => SearchConfig::default(),
            Some(text) => merge_config(text)?,
        };
        let plan = build_rank_space(&dense.spec.searched_specs(), CompressionTarget::new(alpha)?)?;
        let state = SearchState::new(&dense, &plan, &cfg)?;
        *out = Box::into_raw(Box::new(RfSearch {
            dense,
            cost,
            data,
            state,
        }));
        Ok(())
    })
}

fn merge_config(text: &str) -> Result<SearchConfig, Failure> {
    let bad = |e: serde_json::Error| fail(RfStatus::Parse, format!("config_json: {e}"));
    let mut base = serde_json::to_value(SearchConfig::default()).expect("config serializes");
    let patch: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
    let serde_json::Value::Object(patch) = patch else {
        return Err(fail(RfStatus::Parse, "config_json must be an object"));
    };
    let obj = base.as_object_mut().expect("object");
    for (k, v) in patch {
        if !obj.contains_key(&k) {
            return Err(fail(RfStatus::Parse, format!("config_json: unknown key `{k}`")));
        }
        obj.insert(k, v);
    }
    serde_json::from_value(base).map_err(bad)
}

/// Runs one search epoch and reports the expected cost after it.
///
/// # Safety
/// `search` must be valid; `expected_cost` may be null.
#[no_mangle]
pub unsafe extern "C" fn rf_search_run_epoch(search: *mut RfSearch, expected_cost: *mut f64) -> RfStatus {
    guard(|| {
        let s = handle_mut(search, "search")?;
        let ctx = SearchContext::new(&s.dense, &s.cost, &s.data, &s.state.cfg)?;
        let m = s.state.run_epoch(&ctx)?;
        if !expected_cost.is_null() {
            *expected_cost = m.expected_cost;
        }
        Ok(())
    })
}

/// Current rank selection as JSON.
///
/// # Safety
/// `buf` must hold `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn rf_search_selection_json(
    search: *const RfSearch,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> RfStatus {
    guard(|| {
        let s = handle(search, "search")?;
        let json = s.state.selection(&s.cost)?.to_json();
        copy_text(&json, buf, cap, needed)
    })
}

/// Writes a resumable search checkpoint.
///
/// # Safety
/// `search` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_search_save(search: *const RfSearch, path: *const c_char) -> RfStatus {
    guard(|| {
        let s = handle(search, "search")?;
        s.state.to_checkpoint().save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `search` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rf_search_free(search: *mut RfSearch) {
    if !search.is_null() {
        drop(Box::from_raw(search));
    }
}
