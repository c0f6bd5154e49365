//! Browser bindings for the demo page: three interactive operations, each
//! returning a JSON payload the page renders onto canvases.
//!
//! * `fit_explorer` — fit a nonlinearity at a chosen degree and interval,
//!   return curve samples and the measured sup-norm error.
//! * `rotation_economy` — extraction rotation counts, logarithmic vs naive,
//!   measured from real counter deltas.
//! * `encrypted_layer` — run a toy transformer layer under encryption and
//!   compare it against the plaintext oracle.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use enshroud::approx::{cheb_fit, ChebyshevApprox, Profiles};
use enshroud::blocks::{transformer_layer, LayerWeights};
use enshroud::config::{ModelDims, RunConfig};
use enshroud::linalg::{ccmm_with, ElementAccessor, ExtractionStrategy};
use enshroud::packing::{pack_columns, unpack};
use enshroud::reference;
use enshroud::{BackendKind, CounterSnapshot, Engine, HeParams, KeyMaterial};

fn err_str(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(err_str)
}

// ── 1: approximation explorer ─────────────────────────────────────────────

#[derive(Serialize)]
struct FitReport {
    function: String,
    degree: usize,
    domain: (f64, f64),
    depth: u16,
    max_fit_error: f64,
    ps_mults: u64,
    ps_bound: u64,
    xs: Vec<f64>,
    target: Vec<f64>,
    fitted: Vec<f64>,
    error: Vec<f64>,
}

fn named_function(name: &str) -> Result<Box<dyn Fn(f64) -> f64>, String> {
    Ok(match name {
        "sigmoid" => Box::new(|x: f64| 1.0 / (1.0 + (-x).exp())),
        "silu" => Box::new(|x: f64| x / (1.0 + (-x).exp())),
        "sqrt" => Box::new(f64::sqrt),
        "inverse" => Box::new(|x: f64| 1.0 / x),
        other => return Err(err_str(format!("unknown function `{other}`"))),
    })
}

/// Fits `function` on [lo, hi] at `degree` and evaluates it under encryption
/// on a sample grid, reporting the measured multiplication count.
fn fit_explorer_impl(function: &str, degree: usize, lo: f64, hi: f64) -> Result<String, String> {
    if !(lo < hi) || degree == 0 || degree > 255 {
        return Err(err_str("need lo < hi and 1 <= degree <= 255"));
    }
    if (function == "sqrt" || function == "inverse") && lo <= 0.0 {
        return Err(err_str("sqrt/inverse need lo > 0"));
    }
    let f = named_function(function)?;
    let approx: ChebyshevApprox = cheb_fit(&f, lo, hi, degree).map_err(err_str)?;

    // Measure the nonscalar multiplication count on the clear backend.
    let mut params = HeParams::small().with_seed(1);
    params.max_level = approx.depth + 1;
    let engine = Engine::new(Arc::new(
        KeyMaterial::generate(&params, BackendKind::Clear, true).map_err(err_str)?,
    ))
    .map_err(err_str)?;
    let probe = engine
        .encrypt(&engine.encode_default(&[lo]).map_err(err_str)?)
        .map_err(err_str)?;
    let before = engine.counters().snapshot();
    enshroud::approx::ps_eval(&engine, &probe, &approx).map_err(err_str)?;
    let ps_mults = CounterSnapshot::diff(&before, &engine.counters().snapshot()).mult;

    let samples = 257;
    let mut xs = Vec::with_capacity(samples);
    let mut target = Vec::with_capacity(samples);
    let mut fitted = Vec::with_capacity(samples);
    let mut error = Vec::with_capacity(samples);
    for i in 0..samples {
        let x = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
        let t = f(x);
        let p = approx.eval(x);
        xs.push(x);
        target.push(t);
        fitted.push(p);
        error.push(p - t);
    }
    json(&FitReport {
        function: function.to_string(),
        degree,
        domain: (lo, hi),
        depth: approx.depth,
        max_fit_error: approx.max_fit_error,
        ps_mults,
        ps_bound: 2 * (degree as f64 + 1.0).sqrt().ceil() as u64
            + (usize::BITS - degree.leading_zeros()) as u64,
        xs,
        target,
        fitted,
        error,
    })
}

// ── 2: rotation economy ───────────────────────────────────────────────────

#[derive(Serialize)]
struct EconomyRow {
    size: usize,
    log_rotations: u64,
    naive_rotations: u64,
    adds: u64,
    mults: u64,
}

#[derive(Serialize)]
struct EconomyReport {
    rows: Vec<EconomyRow>,
}

/// Measures ciphertext-ciphertext matmul rotation counts (s = d = m) with
/// logarithmic extraction against the naive one-step-per-copy variant.
fn rotation_economy_impl(max_size: usize) -> Result<String, String> {
    let max_size = max_size.clamp(2, 32);
    let params = HeParams::small().with_seed(2);
    let engine = Engine::new(Arc::new(
        KeyMaterial::generate(&params, BackendKind::Clear, true).map_err(err_str)?,
    ))
    .map_err(err_str)?;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut rows = Vec::new();
    let mut n = 2usize;
    while n <= max_size {
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pm = pack_columns(&engine, &x, n, n).map_err(err_str)?;
        let before = engine.counters().snapshot();
        ccmm_with(
            &engine,
            &pm,
            &ElementAccessor::transposed(&pm),
            None,
            ExtractionStrategy::Logarithmic,
        )
        .map_err(err_str)?;
        let log_diff = CounterSnapshot::diff(&before, &engine.counters().snapshot());
        let before = engine.counters().snapshot();
        ccmm_with(
            &engine,
            &pm,
            &ElementAccessor::transposed(&pm),
            None,
            ExtractionStrategy::Naive,
        )
        .map_err(err_str)?;
        let naive_diff = CounterSnapshot::diff(&before, &engine.counters().snapshot());
        rows.push(EconomyRow {
            size: n,
            log_rotations: log_diff.rot,
            naive_rotations: naive_diff.rot,
            adds: log_diff.add + log_diff.sub,
            mults: log_diff.mult,
        });
        n *= 2;
    }
    json(&EconomyReport { rows })
}

// ── 3: encrypted toy layer ────────────────────────────────────────────────

#[derive(Serialize)]
struct StageRow {
    label: String,
    levels: u32,
    mult: u64,
    pmult: u64,
    add: u64,
    rot: u64,
    refresh: u64,
}

#[derive(Serialize)]
struct LayerReport {
    backend: String,
    seq_len: usize,
    dim: usize,
    heads: usize,
    ffn_dim: usize,
    max_abs_error: f64,
    mean_abs_error: f64,
    refreshes: u64,
    output: Vec<f64>,
    oracle: Vec<f64>,
    difference: Vec<f64>,
    stages: Vec<StageRow>,
}

/// Runs one encrypted transformer layer on random seeded data and compares
/// it against the plaintext oracle.
fn encrypted_layer_impl(
    seq_len: usize,
    dim: usize,
    heads: usize,
    ffn_dim: usize,
    seed: u64,
    backend: &str,
) -> Result<String, String> {
    if !(1..=8).contains(&seq_len)
        || !(2..=16).contains(&dim)
        || !(1..=4).contains(&heads)
        || !(2..=32).contains(&ffn_dim)
    {
        return Err(err_str(
            "demo limits: s <= 8, d <= 16, heads <= 4, ffn <= 32",
        ));
    }
    if dim % heads != 0 || (dim / heads) % 2 != 0 {
        return Err(err_str(
            "heads must divide dim and the head dim must be even",
        ));
    }
    let backend: BackendKind = backend.parse().map_err(err_str)?;
    let mut cfg = RunConfig::desk();
    cfg.backend = backend;
    cfg.model = ModelDims {
        seq_len,
        dim,
        heads,
        ffn_dim,
    };
    cfg.params = HeParams::new(1 << 10, 36, 4, 40).with_seed(seed);
    cfg.profiles = Profiles::default().with_norm_domain((0.01, 8.0));
    cfg.seed = seed;
    cfg.validate().map_err(err_str)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let weights = LayerWeights::random(dim, ffn_dim, &mut rng);
    let x: Vec<f64> = (0..seq_len * dim)
        .map(|_| rng.gen_range(-1.0f64..1.0))
        .collect();

    let keys = Arc::new(KeyMaterial::generate(&cfg.params, backend, true).map_err(err_str)?);
    let engine = Engine::new(keys).map_err(err_str)?;
    let lcfg = cfg.layer_config().map_err(err_str)?;
    let pm = pack_columns(&engine, &x, seq_len, dim).map_err(err_str)?;
    let before = engine.counters().snapshot();
    let out = transformer_layer(&engine, &pm, &weights, &lcfg).map_err(err_str)?;
    let refreshes = CounterSnapshot::diff(&before, &engine.counters().snapshot()).refresh;

    let output = unpack(&engine, &out).map_err(err_str)?;
    let oracle = reference::transformer_layer(&x, &weights, &lcfg);
    let difference: Vec<f64> = output.iter().zip(&oracle).map(|(a, b)| a - b).collect();
    let max_abs_error = difference.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mean_abs_error = difference.iter().map(|d| d.abs()).sum::<f64>() / difference.len() as f64;

    let stages = engine
        .tracker()
        .records()
        .iter()
        .map(|r| StageRow {
            label: r.label.clone(),
            levels: r.levels,
            mult: r.counters.mult,
            pmult: r.counters.pmult,
            add: r.counters.add + r.counters.sub,
            rot: r.counters.rot,
            refresh: r.counters.refresh,
        })
        .collect();

    json(&LayerReport {
        backend: backend.to_string(),
        seq_len,
        dim,
        heads,
        ffn_dim,
        max_abs_error,
        mean_abs_error,
        refreshes,
        output,
        oracle,
        difference,
        stages,
    })
}

// ── wasm exports (thin wrappers; JsValue only exists in the browser) ──────

#[wasm_bindgen]
pub fn fit_explorer(function: &str, degree: usize, lo: f64, hi: f64) -> Result<String, JsValue> {
    fit_explorer_impl(function, degree, lo, hi).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn rotation_economy(max_size: usize) -> Result<String, JsValue> {
    rotation_economy_impl(max_size).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn encrypted_layer(
    seq_len: usize,
    dim: usize,
    heads: usize,
    ffn_dim: usize,
    seed: u64,
    backend: &str,
) -> Result<String, JsValue> {
    encrypted_layer_impl(seq_len, dim, heads, ffn_dim, seed, backend)
        .map_err(|e| JsValue::from_str(&e))
}
