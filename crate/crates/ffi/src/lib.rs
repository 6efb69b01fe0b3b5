//! C ABI over `cfgad`.
//!
//! Every fallible function returns a [`CfgadStatus`]; on failure the message
//! is available from [`cfgad_last_error`] on the same thread until the next
//! call. Graphs and trained runs are opaque handles released with their
//! `_free` function. Strings returned through out-pointers are owned by the
//! caller and released with [`cfgad_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cfgad::graph::{generate_synthetic, load_graph, make_splits, Graph, Split, SyntheticSpec};
use cfgad::metrics;
use cfgad::pipeline::{self, Model, PipelineConfig, RunResult};
use cfgad::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfgadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    UndefinedMetric = 6,
    Training = 7,
    Checkpoint = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CfgadMetrics {
    pub macro_f1: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

/// Loaded or generated graph.
pub struct CfgadGraph {
    graph: Graph,
}

/// Result and model of one training run.
pub struct CfgadRun {
    result: RunResult,
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CfgadStatus {
    match e {
        Error::Io(_) => CfgadStatus::Io,
        Error::Parse { .. } | Error::Json(_) => CfgadStatus::Parse,
        Error::Config(_) => CfgadStatus::Config,
        Error::UndefinedMetric(_) => CfgadStatus::UndefinedMetric,
        Error::Diverged(_) | Error::NonFinite(_) => CfgadStatus::Training,
        Error::Checkpoint(_) => CfgadStatus::Checkpoint,
        _ => CfgadStatus::InvalidArgument,
    }
}

struct Fail(CfgadStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CfgadStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfgadStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            CfgadStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CfgadStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CfgadStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn toml_err(e: toml::de::Error) -> Fail {
    Fail(CfgadStatus::Config, e.message().to_string())
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cfgad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn cfgad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a graph from an edge list, a feature CSV and a label file.
#[no_mangle]
pub unsafe extern "C" fn cfgad_graph_load(
    edges: *const c_char,
    features: *const c_char,
    labels: *const c_char,
    graph: *mut *mut CfgadGraph,
) -> CfgadStatus {
    guard(|| {
        let g_out = out(graph, "graph")?;
        let (e, f, l) = (text(edges, "edges")?, text(features, "features")?, text(labels, "labels")?);
        let g = load_graph(&PathBuf::from(e), &PathBuf::from(f), &PathBuf::from(l))?;
        *g_out = Box::into_raw(Box::new(CfgadGraph { graph: g }));
        Ok(())
    })
}

/// Generates a synthetic graph from a TOML synthetic spec.
#[no_mangle]
pub unsafe extern "C" fn cfgad_graph_synthetic(spec_toml: *const c_char, graph: *mut *mut CfgadGraph) -> CfgadStatus {
    guard(|| {
        let g_out = out(graph, "graph")?;
        let spec: SyntheticSpec = toml::from_str(text(spec_toml, "spec")?).map_err(toml_err)?;
        *g_out = Box::into_raw(Box::new(CfgadGraph { graph: generate_synthetic(&spec)? }));
        Ok(())
    })
}

/// Assigns train/val/test splits (val:test = 1:2).
#[no_mangle]
pub unsafe extern "C" fn cfgad_graph_make_splits(graph: *mut CfgadGraph, train_frac: f64, seed: u64) -> CfgadStatus {
    guard(|| {
        let h = out(graph, "graph")?;
        let splits = make_splits(&h.graph, train_frac, (1, 2), seed)?;
        h.graph = h.graph.clone().with_splits(splits)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_graph_num_nodes(graph: *const CfgadGraph) -> usize {
    graph.as_ref().map_or(0, |h| h.graph.n())
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_graph_num_edges(graph: *const CfgadGraph) -> usize {
    graph.as_ref().map_or(0, |h| h.graph.edges().len())
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_graph_free(graph: *mut CfgadGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Trains the pipeline on a split graph. `config_toml` holds pipeline keys
/// (as in a `[pipeline]` section) or is null for the defaults.
#[no_mangle]
pub unsafe extern "C" fn cfgad_train(
    graph: *const CfgadGraph,
    config_toml: *const c_char,
    run: *mut *mut CfgadRun,
) -> CfgadStatus {
    guard(|| {
        let r_out = out(run, "run")?;
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let cfg: PipelineConfig = if config_toml.is_null() {
            PipelineConfig::default()
        } else {
            toml::from_str(text(config_toml, "config")?).map_err(toml_err)?
        };
        let (result, model) = pipeline::train(&g.graph, &cfg)?;
        *r_out = Box::into_raw(Box::new(CfgadRun { result, model }));
        Ok(())
    })
}

/// Test-split metrics recorded at training time.
#[no_mangle]
pub unsafe extern "C" fn cfgad_run_test_metrics(run: *const CfgadRun, metrics: *mut CfgadMetrics) -> CfgadStatus {
    guard(|| {
        let m_out = out(metrics, "metrics")?;
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let m = r
            .result
            .metrics
            .test
            .ok_or_else(|| Fail(CfgadStatus::UndefinedMetric, "test metrics unavailable".into()))?;
        *m_out = CfgadMetrics {
            macro_f1: m.macro_f1,
            auc_roc: m.auc_roc,
            auc_pr: m.auc_pr,
        };
        Ok(())
    })
}

/// The run result as JSON; free with `cfgad_string_free`.
#[no_mangle]
pub unsafe extern "C" fn cfgad_run_result_json(run: *const CfgadRun, json: *mut *mut c_char) -> CfgadStatus {
    guard(|| {
        let j_out = out(json, "json")?;
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let s = CString::new(r.result.to_json()?).map_err(|e| Fail(CfgadStatus::InvalidArgument, e.to_string()))?;
        *j_out = s.into_raw();
        Ok(())
    })
}

/// Recomputes anomaly probabilities for every node of `graph` into `probs`,
/// which must hold `len == cfgad_graph_num_nodes(graph)` values.
#[no_mangle]
pub unsafe extern "C" fn cfgad_run_probabilities(
    run: *const CfgadRun,
    graph: *const CfgadGraph,
    probs: *mut f64,
    len: usize,
) -> CfgadStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        if len != g.graph.n() {
            return Err(Fail(CfgadStatus::InvalidArgument, format!("buffer of {len} for {} nodes", g.graph.n())));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        let p = r.model.probabilities(&g.graph)?;
        std::slice::from_raw_parts_mut(probs, len).copy_from_slice(&p);
        Ok(())
    })
}

/// Evaluates a trained run on the test split of `graph`.
#[no_mangle]
pub unsafe extern "C" fn cfgad_run_evaluate(
    run: *const CfgadRun,
    graph: *const CfgadGraph,
    metrics: *mut CfgadMetrics,
) -> CfgadStatus {
    guard(|| {
        let m_out = out(metrics, "metrics")?;
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let m = r.model.evaluate(&g.graph, &g.graph.splits().mask(Split::Test))?;
        *m_out = CfgadMetrics {
            macro_f1: m.macro_f1,
            auc_roc: m.auc_roc,
            auc_pr: m.auc_pr,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_run_save(run: *const CfgadRun, path: *const c_char) -> CfgadStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        r.model.save(text(path, "path")?)?;
        Ok(())
    })
}

/// Loads a checkpoint. The loaded run carries no training history, so
/// `cfgad_run_test_metrics` fails on it; use `cfgad_run_evaluate`.
#[no_mangle]
pub unsafe extern "C" fn cfgad_run_load(path: *const c_char, run: *mut *mut CfgadRun) -> CfgadStatus {
    guard(|| {
        let r_out = out(run, "run")?;
        let model = Model::load(text(path, "path")?)?;
        let result = RunResult {
            ablation: model.config.ablation,
            seed: model.config.seed,
            p: model.config.heterophilic_fraction,
            alpha: model.config.alpha,
            gamma: model.config.gamma,
            metrics: Default::default(),
            threshold: model.threshold,
            best_epoch: 0,
            pretrain_loss: Vec::new(),
            finetune_loss: Vec::new(),
            pointer_loss: Vec::new(),
            ddpm_loss: Vec::new(),
            eta: model.detector.as_ref().map(|d| d.eta),
            heterophilic_count: 0,
            planned_nodes: 0,
            translated_count: 0,
            config_hash: model.config.hash(),
            wall_clock_s: 0.0,
        };
        *r_out = Box::into_raw(Box::new(CfgadRun { result, model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_run_free(run: *mut CfgadRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_macro_f1(pred: *const u8, truth: *const u8, len: usize, value: *mut f64) -> CfgadStatus {
    guard(|| {
        let v = out(value, "value")?;
        *v = metrics::macro_f1(slice(pred, len, "pred")?, slice(truth, len, "truth")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_auc_roc(scores: *const f64, truth: *const u8, len: usize, value: *mut f64) -> CfgadStatus {
    guard(|| {
        let v = out(value, "value")?;
        *v = metrics::auc_roc(slice(scores, len, "scores")?, slice(truth, len, "truth")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cfgad_auc_pr(scores: *const f64, truth: *const u8, len: usize, value: *mut f64) -> CfgadStatus {
    guard(|| {
        let v = out(value, "value")?;
        *v = metrics::auc_pr(slice(scores, len, "scores")?, slice(truth, len, "truth")?)?;
        Ok(())
    })
}
