//! Transformer building blocks over packed matrices: RoPE, sigmoid
//! attention, RMSNorm with an embedded refresh, SwiGLU and the full layer.
//!
//! Level costs with degree-59 fits everywhere: RoPE (paired) 1, attention
//! 2 + sigmoid depth + 2, RMSNorm 2 + sqrt depth before its single refresh
//! and inverse depth + 2 after, SwiGLU silu depth + 2.

use serde::{Deserialize, Serialize};

use crate::approx::{fit_inverse, fit_sigmoid, fit_sqrt, ps_eval, ChebyshevApprox, Profiles};
use crate::engine::{Ciphertext, Engine};
use crate::error::{Error, Result};
use crate::linalg::{ccmm_with, pcmm, ElementAccessor, ExtractionStrategy};
use crate::metrics::{self, CounterSnapshot, StageRecord};
use crate::packing::{encode_broadcast, encode_slotwise, PackedMatrix, TernaryMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RopeMode {
    /// Pair adjacent columns with per-position cos/sin tables: one level,
    /// zero rotations.
    #[default]
    Paired,
    /// A rotate-by-one variant kept for comparison: two keyed
    /// rotations per column. Under column packing its token-axis rotation
    /// does not realize the coordinate-pair rotation; see `rope_rotate`.
    Rotate,
}

/// Attention shape and bias. The default bias is `-ln(seq_len)`;
/// `with_positive_bias` flips it to `+ln(seq_len)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub seq_len: usize,
    pub model_dim: usize,
    pub bias: f64,
    /// Score scale 1/sqrt(d') per head by default; set to scale by the full
    /// model dimension instead.
    pub full_dim_scale: bool,
}

impl AttentionConfig {
    pub fn new(seq_len: usize, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::DimensionMismatch(format!(
                "heads {heads} must divide the model dimension {model_dim}"
            )));
        }
        Ok(AttentionConfig {
            heads,
            seq_len,
            model_dim,
            bias: -(seq_len as f64).ln(),
            full_dim_scale: false,
        })
    }

    pub fn with_positive_bias(mut self) -> Self {
        self.bias = (self.seq_len as f64).ln();
        self
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn score_scale(&self) -> f64 {
        if self.full_dim_scale {
            1.0 / (self.model_dim as f64).sqrt()
        } else {
            1.0 / (self.head_dim() as f64).sqrt()
        }
    }
}

/// Ternary projections and norm gains for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: TernaryMatrix,
    pub wk: TernaryMatrix,
    pub wv: TernaryMatrix,
    pub wo: TernaryMatrix,
    pub w1: TernaryMatrix,
    pub w2: TernaryMatrix,
    pub w3: TernaryMatrix,
    pub gamma_attn: Vec<f64>,
    pub gamma_ffn: Vec<f64>,
    pub gamma_final: Vec<f64>,
    pub rope_base: f64,
}

impl LayerWeights {
    pub fn random<R: rand::Rng>(dim: usize, ffn_dim: usize, rng: &mut R) -> Self {
        let gamma = |rng: &mut R, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(0.15..0.35)).collect()
        };
        LayerWeights {
            wq: TernaryMatrix::random(dim, dim, rng),
            wk: TernaryMatrix::random(dim, dim, rng),
            wv: TernaryMatrix::random(dim, dim, rng),
            wo: TernaryMatrix::random(dim, dim, rng),
            w1: TernaryMatrix::random(dim, ffn_dim, rng),
            w2: TernaryMatrix::random(dim, ffn_dim, rng),
            w3: TernaryMatrix::random(ffn_dim, dim, rng),
            gamma_attn: gamma(rng, dim),
            gamma_ffn: gamma(rng, dim),
            gamma_final: gamma(rng, dim),
            rope_base: 10_000.0,
        }
    }

    pub fn zeros(dim: usize, ffn_dim: usize) -> Self {
        LayerWeights {
            wq: TernaryMatrix::zeros(dim, dim),
            wk: TernaryMatrix::zeros(dim, dim),
            wv: TernaryMatrix::zeros(dim, dim),
            wo: TernaryMatrix::zeros(dim, dim),
            w1: TernaryMatrix::zeros(dim, ffn_dim),
            w2: TernaryMatrix::zeros(dim, ffn_dim),
            w3: TernaryMatrix::zeros(ffn_dim, dim),
            gamma_attn: vec![1.0; dim],
            gamma_ffn: vec![1.0; dim],
            gamma_final: vec![1.0; dim],
            rope_base: 10_000.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows
    }

    pub fn ffn_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let f = self.ffn_dim();
        for (name, m, rows, cols) in [
            ("wq", &self.wq, d, d),
            ("wk", &self.wk, d, d),
            ("wv", &self.wv, d, d),
            ("wo", &self.wo, d, d),
            ("w1", &self.w1, d, f),
            ("w2", &self.w2, d, f),
            ("w3", &self.w3, f, d),
        ] {
            if m.rows != rows || m.cols != cols {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
        }
        for (name, g) in [
            ("gamma_attn", &self.gamma_attn),
            ("gamma_ffn", &self.gamma_ffn),
            ("gamma_final", &self.gamma_final),
        ] {
            if g.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has length {}, expected {d}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has a non-finite entry"
                )));
            }
        }
        Ok(())
    }
}

/// Per-position rotation tables for one head: `cos[k][pos] = cos(pos *
/// theta_k)` with `theta_k = base^(-2k / head_dim)`.
#[derive(Debug, Clone)]
pub struct RopeTables {
    pub cos: Vec<Vec<f64>>,
    pub sin: Vec<Vec<f64>>,
}

impl RopeTables {
    pub fn new(seq_len: usize, head_dim: usize, base: f64) -> Self {
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(pairs);
        let mut sin = Vec::with_capacity(pairs);
        for k in 0..pairs {
            let theta = base.powf(-2.0 * k as f64 / head_dim as f64);
            cos.push((0..seq_len).map(|p| (p as f64 * theta).cos()).collect());
            sin.push((0..seq_len).map(|p| (p as f64 * theta).sin()).collect());
        }
        RopeTables { cos, sin }
    }
}

/// Everything the full layer needs beyond its weights.
#[derive(Debug, Clone)]
pub struct LayerConfig {
    pub attention: AttentionConfig,
    pub profiles: Profiles,
    pub rope_mode: RopeMode,
    pub eps: f64,
    /// Apply a third norm after the FFN residual.
    pub final_norm: bool,
    pub extraction: ExtractionStrategy,
}

impl LayerConfig {
    pub fn new(attention: AttentionConfig) -> Self {
        LayerConfig {
            attention,
            profiles: Profiles::default(),
            rope_mode: RopeMode::Paired,
            eps: 1e-5,
            final_norm: false,
            extraction: ExtractionStrategy::Logarithmic,
        }
    }
}

/// The fitted polynomials a layer evaluates; built once per configuration.
#[derive(Debug, Clone)]
pub struct FittedSet {
    /// sigma(u + bias) with the attention bias folded in.
    pub sigmoid: ChebyshevApprox,
    /// sigma(u) for the SiLU product.
    pub silu_sigmoid: ChebyshevApprox,
    pub sqrt: ChebyshevApprox,
    pub inverse: ChebyshevApprox,
}

impl FittedSet {
    pub fn new(profiles: &Profiles, attention_bias: f64) -> Result<Self> {
        Ok(FittedSet {
            sigmoid: fit_sigmoid(
                attention_bias,
                profiles.sigmoid.domain,
                profiles.sigmoid.degree,
            )?,
            silu_sigmoid: fit_sigmoid(0.0, profiles.silu.domain, profiles.silu.degree)?,
            sqrt: fit_sqrt(profiles.sqrt.domain, profiles.sqrt.degree)?,
            inverse: fit_inverse(profiles.inverse.domain, profiles.inverse.degree)?,
        })
    }
}

fn record_stage(
    engine: &Engine,
    label: &str,
    entry: (u16, u32),
    out: &PackedMatrix,
    before: &CounterSnapshot,
    start: Option<std::time::Instant>,
    note: Option<String>,
) {
    engine.tracker().record(StageRecord {
        label: label.into(),
        levels: out.consumed().saturating_sub(entry.1),
        entry_level: entry.0,
        exit_level: out.level(),
        counters: CounterSnapshot::diff(before, &engine.counters().snapshot()),
        wall_ms: metrics::wall_ms(start),
        note,
    });
}

/// Columnwise residual addition; the higher-level operand is releveled down
/// for free.
pub fn packed_add(engine: &Engine, a: &PackedMatrix, b: &PackedMatrix) -> Result<PackedMatrix> {
    if a.ncols() != b.ncols() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "residual: {}x{} against {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let cols = a
        .cols
        .iter()
        .zip(&b.cols)
        .map(|(x, y)| engine.add(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(PackedMatrix {
        cols,
        rows: a.nrows(),
    })
}

fn head_slice(pm: &PackedMatrix, head: usize, head_dim: usize) -> PackedMatrix {
    PackedMatrix {
        cols: pm.cols[head * head_dim..(head + 1) * head_dim].to_vec(),
        rows: pm.nrows(),
    }
}

/// Rotary position embedding on one head (paired-column mode by default).
///
/// Paired mode pairs columns (2k, 2k+1) and applies per-position cos/sin
/// tables slotwise: one level, zero rotations. Rotate mode runs the
/// rotate-by-one variant for comparison; its sign exchange crosses token
/// positions, not coordinate pairs.
pub fn rope(
    engine: &Engine,
    pm: &PackedMatrix,
    tables: &RopeTables,
    mode: RopeMode,
) -> Result<PackedMatrix> {
    let d = pm.ncols();
    if d % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "rope needs an even head dimension, got {d}"
        )));
    }
    if tables.cos.len() < d / 2 {
        return Err(Error::DimensionMismatch(format!(
            "rope tables cover {} pairs, need {}",
            tables.cos.len(),
            d / 2
        )));
    }
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (pm.level(), pm.consumed());
    let level = pm.level();

    let out = match mode {
        RopeMode::Paired => {
            let mut cols = Vec::with_capacity(d);
            for k in 0..d / 2 {
                let cos = encode_slotwise(engine, &tables.cos[k], level)?;
                let sin = encode_slotwise(engine, &tables.sin[k], level)?;
                let even = &pm.cols[2 * k];
                let odd = &pm.cols[2 * k + 1];
                let y_even = engine.sub(&engine.pmult(even, &cos)?, &engine.pmult(odd, &sin)?)?;
                let y_odd = engine.add(&engine.pmult(odd, &cos)?, &engine.pmult(even, &sin)?)?;
                cols.push(y_even);
                cols.push(y_odd);
            }
            PackedMatrix {
                cols,
                rows: pm.nrows(),
            }
        }
        RopeMode::Rotate => rope_rotate(engine, pm, tables)?,
    };
    record_stage(
        engine,
        "rope",
        entry,
        &out,
        &before,
        start,
        Some(format!("{mode:?}")),
    );
    Ok(out)
}

/// The rotate-by-one variant: alternating +-1 sign masks over the
/// slots, two keyed rotations per column.
fn rope_rotate(engine: &Engine, pm: &PackedMatrix, tables: &RopeTables) -> Result<PackedMatrix> {
    let n = engine.slot_count();
    let s = pm.nrows();
    let neg: Vec<f64> = (0..n)
        .map(|i| if i % 2 == 0 { -1.0 } else { 0.0 })
        .collect();
    let pos: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
    let level = pm.level();
    let neg_pt = engine.encode(&neg, level, engine.params().scale_bits)?;
    let pos_pt = engine.encode(&pos, level, engine.params().scale_bits)?;
    let mut cols = Vec::with_capacity(pm.ncols());
    for (i, q) in pm.cols.iter().enumerate() {
        let k = i / 2;
        let cos: Vec<f64> = tables.cos[k][..s].to_vec();
        let sin: Vec<f64> = tables.sin[k][..s].to_vec();
        let right = engine.pmult(&engine.rotate(q, 1)?, &neg_pt)?;
        let left = engine.pmult(&engine.rotate(q, -1)?, &pos_pt)?;
        let swapped = engine.add(&right, &left)?;
        let cos_pt = encode_slotwise(engine, &cos, q.level())?;
        let sin_pt = encode_slotwise(engine, &sin, swapped.level())?;
        let y = engine.add(
            &engine.pmult(q, &cos_pt)?,
            &engine.pmult(&swapped, &sin_pt)?,
        )?;
        cols.push(y);
    }
    Ok(PackedMatrix {
        cols,
        rows: pm.nrows(),
    })
}

/// Sigmoid attention: per head, scores via Q K^T (scale folded into the
/// extraction mask), elementwise fitted sigmoid with the bias folded into
/// the fit, then the score-value product. No per-row normalization, hence
/// no rotations outside element extraction.
pub fn sigmoid_attention(
    engine: &Engine,
    q: &PackedMatrix,
    k: &PackedMatrix,
    v: &PackedMatrix,
    cfg: &AttentionConfig,
    sigmoid_fit: &ChebyshevApprox,
    extraction: ExtractionStrategy,
) -> Result<PackedMatrix> {
    let d = cfg.model_dim;
    for (name, m) in [("q", q), ("k", k), ("v", v)] {
        if m.ncols() != d || m.nrows() != cfg.seq_len {
            return Err(Error::DimensionMismatch(format!(
                "attention {name} is {}x{}, expected {}x{d}",
                m.nrows(),
                m.ncols(),
                cfg.seq_len
            )));
        }
    }
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (
        q.level().min(k.level()).min(v.level()),
        q.consumed().max(k.consumed()).max(v.consumed()),
    );
    let hd = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = head_slice(q, h, hd);
        let kh = head_slice(k, h, hd);
        let vh = head_slice(v, h, hd);
        let scores = ccmm_with(
            engine,
            &qh,
            &ElementAccessor::transposed(&kh),
            Some(cfg.score_scale()),
            extraction,
        )?;
        let weights = PackedMatrix {
            cols: scores
                .cols
                .iter()
                .map(|c| ps_eval(engine, c, sigmoid_fit))
                .collect::<Result<Vec<_>>>()?,
            rows: scores.rows,
        };
        let out_h = ccmm_with(
            engine,
            &weights,
            &ElementAccessor::direct(&vh),
            None,
            extraction,
        )?;
        heads.push(out_h);
    }
    let mut cols = Vec::with_capacity(d);
    for h in heads {
        cols.extend(h.cols);
    }
    let out = PackedMatrix {
        cols,
        rows: cfg.seq_len,
    };
    record_stage(
        engine,
        "sigmoid_attention",
        entry,
        &out,
        &before,
        start,
        Some(format!("heads={}", cfg.heads)),
    );
    Ok(out)
}

/// RMSNorm with the refresh embedded at its narrowest point: after squares,
/// mean and the sqrt fit, the statistic is a single ciphertext; exactly one
/// refresh happens there regardless of the width d.
pub fn rmsnorm(
    engine: &Engine,
    pm: &PackedMatrix,
    gamma: &[f64],
    eps: f64,
    fits: &FittedSet,
) -> Result<PackedMatrix> {
    let d = pm.ncols();
    if gamma.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "gamma has length {}, matrix has {d} columns",
            gamma.len()
        )));
    }
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (pm.level(), pm.consumed());

    // Square and reduce across columns to one ciphertext.
    let mut sum: Option<Ciphertext> = None;
    for col in &pm.cols {
        let sq = engine.mult(col, col)?;
        sum = Some(match sum {
            None => sq,
            Some(prev) => engine.add(&prev, &sq)?,
        });
    }
    let sum = sum.ok_or_else(|| Error::DimensionMismatch("rmsnorm of empty matrix".into()))?;
    let mean = engine.pmult(
        &sum,
        &encode_broadcast(engine, 1.0 / d as f64, sum.level())?,
    )?;
    let root = ps_eval(engine, &mean, &fits.sqrt)?;
    let denom = engine.padd(&root, &encode_broadcast(engine, eps, root.level())?)?;

    // The single refresh, on the reduced statistic.
    let denom = {
        let _scope = engine.refresh_scope();
        engine.refresh(&denom)?
    };

    let inv = ps_eval(engine, &denom, &fits.inverse)?;
    let mut cols = Vec::with_capacity(d);
    for (j, col) in pm.cols.iter().enumerate() {
        let scaled = engine.mult(col, &inv)?;
        let g = encode_broadcast(engine, gamma[j], scaled.level())?;
        cols.push(engine.pmult(&scaled, &g)?);
    }
    let out = PackedMatrix {
        cols,
        rows: pm.nrows(),
    };
    record_stage(engine, "rmsnorm", entry, &out, &before, start, None);
    Ok(out)
}

/// Gated feed-forward: gate and up projections cost no levels (ternary
/// weights), the activation runs on the up path, and the down projection is
/// again level-free.
pub fn swiglu_ffn(
    engine: &Engine,
    pm: &PackedMatrix,
    w1: &TernaryMatrix,
    w2: &TernaryMatrix,
    w3: &TernaryMatrix,
    fits: &FittedSet,
) -> Result<PackedMatrix> {
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (pm.level(), pm.consumed());

    let gate = pcmm(engine, pm, w1)?;
    let up = pcmm(engine, pm, w2)?;
    let act = PackedMatrix {
        cols: up
            .cols
            .iter()
            .map(|c| {
                let sig = ps_eval(engine, c, &fits.silu_sigmoid)?;
                engine.mult(c, &sig)
            })
            .collect::<Result<Vec<_>>>()?,
        rows: up.rows,
    };
    let h = crate::linalg::hadamard_cc(engine, &gate, &act)?;
    let out = pcmm(engine, &h, w3)?;
    record_stage(engine, "swiglu_ffn", entry, &out, &before, start, None);
    Ok(out)
}

/// One pre-norm transformer layer:
/// norm -> Q/K/V -> RoPE -> sigmoid attention -> output projection ->
/// residual -> norm -> SwiGLU -> residual (-> optional final norm).
/// Exactly one refresh per norm.
pub fn transformer_layer(
    engine: &Engine,
    pm: &PackedMatrix,
    w: &LayerWeights,
    cfg: &LayerConfig,
) -> Result<PackedMatrix> {
    w.validate()?;
    let d = w.dim();
    if pm.ncols() != d || pm.nrows() != cfg.attention.seq_len {
        return Err(Error::DimensionMismatch(format!(
            "layer input is {}x{}, expected {}x{d}",
            pm.nrows(),
            pm.ncols(),
            cfg.attention.seq_len
        )));
    }
    let fits = FittedSet::new(&cfg.profiles, cfg.attention.bias)?;
    let tables = RopeTables::new(cfg.attention.seq_len, cfg.attention.head_dim(), w.rope_base);
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (pm.level(), pm.consumed());

    let x1 = rmsnorm(engine, pm, &w.gamma_attn, cfg.eps, &fits)?;
    let q = pcmm(engine, &x1, &w.wq)?;
    let k = pcmm(engine, &x1, &w.wk)?;
    let v = pcmm(engine, &x1, &w.wv)?;

    let hd = cfg.attention.head_dim();
    let mut q_cols = Vec::with_capacity(d);
    let mut k_cols = Vec::with_capacity(d);
    for h in 0..cfg.attention.heads {
        q_cols.extend(rope(engine, &head_slice(&q, h, hd), &tables, cfg.rope_mode)?.cols);
        k_cols.extend(rope(engine, &head_slice(&k, h, hd), &tables, cfg.rope_mode)?.cols);
    }
    let q = PackedMatrix {
        cols: q_cols,
        rows: q.rows,
    };
    let k = PackedMatrix {
        cols: k_cols,
        rows: k.rows,
    };

    let attn = sigmoid_attention(
        engine,
        &q,
        &k,
        &v,
        &cfg.attention,
        &fits.sigmoid,
        cfg.extraction,
    )?;
    let projected = pcmm(engine, &attn, &w.wo)?;
    let x2 = packed_add(engine, pm, &projected)?;

    let x3 = rmsnorm(engine, &x2, &w.gamma_ffn, cfg.eps, &fits)?;
    let ffn = swiglu_ffn(engine, &x3, &w.w1, &w.w2, &w.w3, &fits)?;
    let mut out = packed_add(engine, &x2, &ffn)?;
    if cfg.final_norm {
        out = rmsnorm(engine, &out, &w.gamma_final, cfg.eps, &fits)?;
    }
    record_stage(
        engine,
        "transformer_layer",
        entry,
        &out,
        &before,
        start,
        Some(format!(
            "s={} d={d} heads={} ffn={}",
            cfg.attention.seq_len,
            cfg.attention.heads,
            w.ffn_dim()
        )),
    );
    Ok(out)
}

/// Runs one named kernel over an encrypted input, as the `infer` entry point
/// does: the full layer or one of its stages in isolation.
pub fn run_kernel(
    engine: &Engine,
    pm: &PackedMatrix,
    w: &LayerWeights,
    cfg: &LayerConfig,
    kernel: crate::config::Kernel,
) -> Result<PackedMatrix> {
    use crate::config::Kernel;
    let fits = FittedSet::new(&cfg.profiles, cfg.attention.bias)?;
    match kernel {
        Kernel::Pcmm => pcmm(engine, pm, &w.wq),
        Kernel::Ccmm => {
            // Self product X X^T through the transposed accessor.
            ccmm_with(
                engine,
                pm,
                &ElementAccessor::transposed(pm),
                Some(cfg.attention.score_scale()),
                cfg.extraction,
            )
        }
        Kernel::Rope => {
            let tables = RopeTables::new(pm.nrows(), pm.ncols(), w.rope_base);
            rope(engine, pm, &tables, cfg.rope_mode)
        }
        Kernel::Attention => {
            let hd = cfg.attention.head_dim();
            let tables = RopeTables::new(cfg.attention.seq_len, hd, w.rope_base);
            let q = pcmm(engine, pm, &w.wq)?;
            let k = pcmm(engine, pm, &w.wk)?;
            let v = pcmm(engine, pm, &w.wv)?;
            let mut q_cols = Vec::new();
            let mut k_cols = Vec::new();
            for h in 0..cfg.attention.heads {
                q_cols.extend(rope(engine, &head_slice(&q, h, hd), &tables, cfg.rope_mode)?.cols);
                k_cols.extend(rope(engine, &head_slice(&k, h, hd), &tables, cfg.rope_mode)?.cols);
            }
            let q = PackedMatrix {
                cols: q_cols,
                rows: q.rows,
            };
            let k = PackedMatrix {
                cols: k_cols,
                rows: k.rows,
            };
            sigmoid_attention(
                engine,
                &q,
                &k,
                &v,
                &cfg.attention,
                &fits.sigmoid,
                cfg.extraction,
            )
        }
        Kernel::Rmsnorm => rmsnorm(engine, pm, &w.gamma_attn, cfg.eps, &fits),
        Kernel::Ffn => swiglu_ffn(engine, pm, &w.w1, &w.w2, &w.w3, &fits),
        Kernel::Layer => transformer_layer(engine, pm, w, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::KeyMaterial;
    use crate::packing::{pack_columns, unpack};
    use crate::params::{BackendKind, HeParams};
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn clear_engine(max_level: u16, refresh_cost: u16) -> Engine {
        let mut p = HeParams::small().with_seed(21);
        p.max_level = max_level;
        p.refresh_cost = refresh_cost;
        Engine::new(Arc::new(
            KeyMaterial::generate(&p, BackendKind::Clear, true).unwrap(),
        ))
        .unwrap()
    }

    fn ckks_engine(max_level: u16, refresh_cost: u16) -> Engine {
        let mut p = HeParams::new(1 << 8, max_level, refresh_cost, 40).with_seed(21);
        p.base_bits = 56;
        Engine::new(Arc::new(
            KeyMaterial::generate(&p, BackendKind::Ckks, true).unwrap(),
        ))
        .unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, half: f64) -> Vec<f64> {
        (0..rows * cols)
            .map(|_| rng.gen_range(-half..half))
            .collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn norm_profiles() -> Profiles {
        Profiles::default().with_norm_domain((0.05, 5.0))
    }

    #[test]
    fn rope_identity_under_zero_angles() {
        let e = clear_engine(8, 2);
        let x = [0.3, -0.4, 0.7, 0.1];
        let pm = pack_columns(&e, &x, 2, 2).unwrap();
        // cos = 1, sin = 0 everywhere: a zero rotation angle.
        let tables = RopeTables {
            cos: vec![vec![1.0; 2]],
            sin: vec![vec![0.0; 2]],
        };
        let out = rope(&e, &pm, &tables, RopeMode::Paired).unwrap();
        let got = unpack(&e, &out).unwrap();
        assert!(max_abs_diff(&got, &x) < 1e-12);
        assert_eq!(pm.level() - out.level(), 1);
    }

    #[test]
    fn rope_quarter_turn_on_unit_vector() {
        let e = clear_engine(8, 2);
        // Single pair, position 1 rotated by pi/2: (1, 0) -> (0, 1).
        let x = [1.0, 0.0, 1.0, 0.0]; // positions 0 and 1
        let pm = pack_columns(&e, &x, 2, 2).unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let tables = RopeTables {
            cos: vec![vec![1.0, half_pi.cos()]],
            sin: vec![vec![0.0, half_pi.sin()]],
        };
        let out = rope(&e, &pm, &tables, RopeMode::Paired).unwrap();
        let got = unpack(&e, &out).unwrap();
        assert!((got[0] - 1.0).abs() < 1e-12 && got[1].abs() < 1e-12);
        assert!(got[2].abs() < 1e-12 && (got[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_matches_reference_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for e in [clear_engine(8, 2), ckks_engine(8, 2)] {
            let (s, hd) = (4, 4);
            let x = rand_matrix(&mut rng, s, hd, 1.0);
            let pm = pack_columns(&e, &x, s, hd).unwrap();
            let tables = RopeTables::new(s, hd, 10_000.0);
            let out = rope(&e, &pm, &tables, RopeMode::Paired).unwrap();
            let got = unpack(&e, &out).unwrap();
            let want = reference::rope(&x, s, hd, 10_000.0);
            assert!(max_abs_diff(&got, &want) < 1e-4);
        }
    }

    #[test]
    fn rope_rotation_counts_per_mode() {
        let e = clear_engine(8, 2);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let pm = pack_columns(&e, &x, 2, 4).unwrap();
        let tables = RopeTables::new(2, 4, 10_000.0);

        let before = e.counters().snapshot();
        rope(&e, &pm, &tables, RopeMode::Paired).unwrap();
        assert_eq!(
            CounterSnapshot::diff(&before, &e.counters().snapshot()).rot,
            0
        );
        e.tracker().assert_budget("rope", 1).unwrap();

        let before = e.counters().snapshot();
        rope(&e, &pm, &tables, RopeMode::Rotate).unwrap();
        let diff = CounterSnapshot::diff(&before, &e.counters().snapshot());
        assert_eq!(diff.rot, 2 * pm.ncols() as u64);
    }

    #[test]
    fn rope_rotate_mixes_token_positions_not_pairs() {
        // The rotate-by-one variant applies its sign exchange along slots
        // (token positions); on a multi-token input it therefore differs
        // from the coordinate-pair oracle. Verify it against its own mirror.
        let e = clear_engine(8, 2);
        let (s, hd) = (4, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let x = rand_matrix(&mut rng, s, hd, 1.0);
        let pm = pack_columns(&e, &x, s, hd).unwrap();
        let tables = RopeTables::new(s, hd, 10_000.0);
        let out = rope(&e, &pm, &tables, RopeMode::Rotate).unwrap();
        let got = unpack(&e, &out).unwrap();

        // Plain mirror of the rotate-by-one arithmetic over columns.
        let col = |j: usize| -> Vec<f64> { (0..s).map(|i| x[i * hd + j]).collect() };
        let mut want = vec![0.0; s * hd];
        for j in 0..hd {
            let qc = col(j);
            let k = j / 2;
            for i in 0..s {
                let up = qc[(i + 1) % s] * if i % 2 == 0 { -1.0 } else { 0.0 };
                let down = qc[(i + s - 1) % s] * if i % 2 == 0 { 0.0 } else { 1.0 };
                let t = up + down;
                want[i * hd + j] = qc[i] * tables.cos[k][i] + t * tables.sin[k][i];
            }
        }
        assert!(max_abs_diff(&got, &want) < 1e-12);

        // And it genuinely differs from the Eq-style pair rotation here.
        let oracle = reference::rope(&x, s, hd, 10_000.0);
        assert!(max_abs_diff(&got, &oracle) > 1e-3);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let e = clear_engine(8, 2);
        let pm = pack_columns(&e, &[1.0, 2.0, 3.0], 1, 3).unwrap();
        let tables = RopeTables::new(1, 4, 10.0);
        assert!(rope(&e, &pm, &tables, RopeMode::Paired).is_err());
    }

    #[test]
    fn attention_zero_inputs_give_zero_output() {
        let e = clear_engine(16, 2);
        let cfg = AttentionConfig::new(2, 2, 1).unwrap();
        let fits = FittedSet::new(&Profiles::default(), cfg.bias).unwrap();
        let z = pack_columns(&e, &vec![0.0; 4], 2, 2).unwrap();
        let out = sigmoid_attention(
            &e,
            &z,
            &z,
            &z,
            &cfg,
            &fits.sigmoid,
            ExtractionStrategy::Logarithmic,
        )
        .unwrap();
        let got = unpack(&e, &out).unwrap();
        // Every attention weight is sigma(bias), but V = 0.
        assert!(got.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn attention_single_token_closed_form() {
        for e in [clear_engine(16, 2), ckks_engine(16, 2)] {
            let cfg = AttentionConfig::new(1, 2, 1).unwrap();
            let fits = FittedSet::new(&Profiles::default(), cfg.bias).unwrap();
            let q = pack_columns(&e, &[0.3, -0.2], 1, 2).unwrap();
            let k = pack_columns(&e, &[0.5, 0.1], 1, 2).unwrap();
            let v = pack_columns(&e, &[2.0, -1.0], 1, 2).unwrap();
            let out = sigmoid_attention(
                &e,
                &q,
                &k,
                &v,
                &cfg,
                &fits.sigmoid,
                ExtractionStrategy::Logarithmic,
            )
            .unwrap();
            let got = unpack(&e, &out).unwrap();
            let score = (0.3 * 0.5 + (-0.2) * 0.1) / (2.0f64).sqrt();
            let w = reference::sigmoid(score + cfg.bias);
            assert!((got[0] - w * 2.0).abs() < 1e-3, "{} vs {}", got[0], w * 2.0);
            assert!((got[1] + w).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_matches_oracles() {
        let mut rng = ChaCha20Rng::seed_from_u64(34);
        for e in [clear_engine(16, 2), ckks_engine(16, 2)] {
            let (s, d, heads) = (4, 4, 2);
            let cfg = AttentionConfig::new(s, d, heads).unwrap();
            let fits = FittedSet::new(&Profiles::default(), cfg.bias).unwrap();
            let q = rand_matrix(&mut rng, s, d, 1.0);
            let k = rand_matrix(&mut rng, s, d, 1.0);
            let v = rand_matrix(&mut rng, s, d, 1.0);
            let pq = pack_columns(&e, &q, s, d).unwrap();
            let pk = pack_columns(&e, &k, s, d).unwrap();
            let pv = pack_columns(&e, &v, s, d).unwrap();
            let out = sigmoid_attention(
                &e,
                &pq,
                &pk,
                &pv,
                &cfg,
                &fits.sigmoid,
                ExtractionStrategy::Logarithmic,
            )
            .unwrap();
            let got = unpack(&e, &out).unwrap();

            let truth =
                reference::sigmoid_attention(&q, &k, &v, s, d, heads, cfg.score_scale(), cfg.bias);
            assert!(max_abs_diff(&got, &truth) <= 1e-2, "true-math oracle");

            let mirror = reference::sigmoid_attention_protocol(
                &q,
                &k,
                &v,
                s,
                d,
                heads,
                cfg.score_scale(),
                &fits.sigmoid,
            );
            let tol = match e.backend() {
                BackendKind::Clear => 1e-9,
                BackendKind::Ckks => 1e-3,
            };
            assert!(max_abs_diff(&got, &mirror) <= tol, "protocol mirror");
        }
    }

    #[test]
    fn attention_rotations_come_only_from_extraction() {
        let e = clear_engine(16, 2);
        let (s, d, heads) = (4usize, 4usize, 2usize);
        let cfg = AttentionConfig::new(s, d, heads).unwrap();
        let fits = FittedSet::new(&Profiles::default(), cfg.bias).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let m = rand_matrix(&mut rng, s, d, 1.0);
        let pm = pack_columns(&e, &m, s, d).unwrap();
        let before = e.counters().snapshot();
        sigmoid_attention(
            &e,
            &pm,
            &pm,
            &pm,
            &cfg,
            &fits.sigmoid,
            ExtractionStrategy::Logarithmic,
        )
        .unwrap();
        let rot = CounterSnapshot::diff(&before, &e.counters().snapshot()).rot;
        let hd = d / heads;
        let log_s = (usize::BITS - (s - 1).leading_zeros()) as u64;
        // Q K^T: hd*s extractions; weights * V: s*hd extractions; per head.
        let expected = (heads * (hd * s + s * hd)) as u64 * log_s;
        assert_eq!(rot, expected);
    }

    #[test]
    fn rmsnorm_constant_matrix_yields_gamma() {
        for e in [clear_engine(24, 4), ckks_engine(24, 4)] {
            let fits = FittedSet::new(&norm_profiles(), 0.0).unwrap();
            let (s, d) = (2, 4);
            let x = vec![0.8; s * d]; // RMS of every row is 0.8
            let gamma = [0.5, 1.0, 1.5, 2.0];
            let pm = pack_columns(&e, &x, s, d).unwrap();
            let out = rmsnorm(&e, &pm, &gamma, 0.0, &fits).unwrap();
            let got = unpack(&e, &out).unwrap();
            for i in 0..s {
                for j in 0..d {
                    assert!(
                        (got[i * d + j] - gamma[j]).abs() < 1e-3,
                        "({i},{j}): {}",
                        got[i * d + j]
                    );
                }
            }
        }
    }

    #[test]
    fn rmsnorm_known_row_rms_halves_input() {
        let e = clear_engine(24, 4);
        let fits = FittedSet::new(&norm_profiles(), 0.0).unwrap();
        // Rows with RMS exactly 2.
        let x = vec![2.0, -2.0, 2.0, -2.0, -2.0, 2.0, -2.0, 2.0];
        let gamma = [1.0; 4];
        let pm = pack_columns(&e, &x, 2, 4).unwrap();
        let out = rmsnorm(&e, &pm, &gamma, 0.0, &fits).unwrap();
        let got = unpack(&e, &out).unwrap();
        let want = reference::rmsnorm(&x, &gamma, 0.0, 2, 4);
        assert!(max_abs_diff(&got, &want) < 1e-4);
        for (g, x) in got.iter().zip(&x) {
            assert!((g - x / 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rmsnorm_matches_protocol_mirror_exactly_on_clear() {
        let e = clear_engine(24, 4);
        let profiles = norm_profiles();
        let fits = FittedSet::new(&profiles, 0.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(36);
        let (s, d) = (4, 8);
        let x = rand_matrix(&mut rng, s, d, 1.0);
        let gamma: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..1.2)).collect();
        let pm = pack_columns(&e, &x, s, d).unwrap();
        let out = rmsnorm(&e, &pm, &gamma, 1e-5, &fits).unwrap();
        let got = unpack(&e, &out).unwrap();
        let mirror = reference::rmsnorm_protocol(&x, &gamma, 1e-5, s, d, &fits.sqrt, &fits.inverse);
        assert!(max_abs_diff(&got, &mirror) < 1e-9);
    }

    #[test]
    fn rmsnorm_refreshes_exactly_once_regardless_of_width() {
        let e = clear_engine(24, 4);
        let fits = FittedSet::new(&norm_profiles(), 0.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        for d in [4usize, 8, 16] {
            let x = rand_matrix(&mut rng, 4, d, 1.0);
            let gamma = vec![1.0; d];
            let pm = pack_columns(&e, &x, 4, d).unwrap();
            let before = e.counters().snapshot();
            rmsnorm(&e, &pm, &gamma, 1e-5, &fits).unwrap();
            let diff = CounterSnapshot::diff(&before, &e.counters().snapshot());
            assert_eq!(diff.refresh, 1, "d={d}");
        }
    }

    #[test]
    fn rmsnorm_deep_inverse_budget_is_19() {
        let e = clear_engine(24, 4);
        let profiles = Profiles::deep_inverse();
        assert_eq!(profiles.rmsnorm_levels(), 19);
        let fits = FittedSet::new(&profiles, 0.0).unwrap();
        let x = vec![0.5; 4 * 4];
        let pm = pack_columns(&e, &x, 4, 4).unwrap();
        rmsnorm(&e, &pm, &[1.0; 4], 1e-5, &fits).unwrap();
        e.tracker().assert_budget("rmsnorm", 19).unwrap();

        // Default profile: 2 + 7 + 7 + 2.
        let fits = FittedSet::new(&Profiles::default(), 0.0).unwrap();
        rmsnorm(&e, &pm, &[1.0; 4], 1e-5, &fits).unwrap();
        e.tracker().assert_budget("rmsnorm", 18).unwrap();
    }

    #[test]
    fn ffn_zero_weights_zero_output() {
        let e = clear_engine(16, 2);
        let fits = FittedSet::new(&Profiles::default(), 0.0).unwrap();
        let pm = pack_columns(&e, &[0.4, -0.6, 1.0, 0.2], 2, 2).unwrap();
        let z = TernaryMatrix::zeros(2, 4);
        let z3 = TernaryMatrix::zeros(4, 2);
        let out = swiglu_ffn(&e, &pm, &z, &z, &z3, &fits).unwrap();
        let got = unpack(&e, &out).unwrap();
        assert!(got.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn ffn_tiny_case_matches_oracles() {
        let mut rng = ChaCha20Rng::seed_from_u64(38);
        for e in [clear_engine(16, 2), ckks_engine(16, 2)] {
            let (s, d, f) = (2, 2, 2);
            let w1 = TernaryMatrix::new(2, 2, vec![1, -1, 0, 1]).unwrap();
            let w2 = TernaryMatrix::new(2, 2, vec![1, 0, -1, 1]).unwrap();
            let w3 = TernaryMatrix::new(2, 2, vec![1, 1, -1, 0]).unwrap();
            let fits = FittedSet::new(&Profiles::default(), 0.0).unwrap();
            let x = rand_matrix(&mut rng, s, d, 1.0);
            let pm = pack_columns(&e, &x, s, d).unwrap();
            let out = swiglu_ffn(&e, &pm, &w1, &w2, &w3, &fits).unwrap();
            let got = unpack(&e, &out).unwrap();

            let truth =
                reference::swiglu_ffn(&x, &w1.to_f64(), &w2.to_f64(), &w3.to_f64(), s, d, f);
            assert!(max_abs_diff(&got, &truth) < 1e-3);

            let mirror = reference::swiglu_ffn_protocol(
                &x,
                &w1.to_f64(),
                &w2.to_f64(),
                &w3.to_f64(),
                s,
                d,
                f,
                &fits.silu_sigmoid,
            );
            let tol = match e.backend() {
                BackendKind::Clear => 1e-9,
                BackendKind::Ckks => 1e-4,
            };
            assert!(max_abs_diff(&got, &mirror) <= tol);
        }
    }

    fn layer_engines() -> Vec<Engine> {
        vec![clear_engine(36, 4), ckks_engine(36, 4)]
    }

    fn layer_cfg(s: usize, d: usize, heads: usize) -> LayerConfig {
        let mut cfg = LayerConfig::new(AttentionConfig::new(s, d, heads).unwrap());
        cfg.profiles = norm_profiles();
        cfg
    }

    #[test]
    fn layer_zero_input_zero_weights() {
        let e = clear_engine(50, 4);
        let (s, d, f) = (2, 4, 8);
        let cfg = layer_cfg(s, d, 2);
        let w = LayerWeights::zeros(d, f);
        let pm = pack_columns(&e, &vec![0.0; s * d], s, d).unwrap();
        let out = transformer_layer(&e, &pm, &w, &cfg).unwrap();
        let got = unpack(&e, &out).unwrap();
        assert!(got.iter().all(|&v| v.abs() < 1e-6), "{got:?}");
    }

    #[test]
    fn layer_matches_protocol_mirror_and_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        let (s, d, heads, f) = (4, 4, 2, 8);
        let w = LayerWeights::random(d, f, &mut rng);
        let cfg = layer_cfg(s, d, heads);
        let x = rand_matrix(&mut rng, s, d, 1.0);
        for e in layer_engines() {
            let pm = pack_columns(&e, &x, s, d).unwrap();
            let out = transformer_layer(&e, &pm, &w, &cfg).unwrap();
            let got = unpack(&e, &out).unwrap();

            let truth = reference::transformer_layer(&x, &w, &cfg);
            assert!(
                max_abs_diff(&got, &truth) <= 1e-2,
                "{:?} vs true-math oracle: {}",
                e.backend(),
                max_abs_diff(&got, &truth)
            );

            let fits = FittedSet::new(&cfg.profiles, cfg.attention.bias).unwrap();
            let mirror = reference::transformer_layer_protocol(&x, &w, &cfg, &fits);
            let tol = match e.backend() {
                BackendKind::Clear => 1e-9,
                BackendKind::Ckks => 1e-3,
            };
            assert!(
                max_abs_diff(&got, &mirror) <= tol,
                "{:?} vs protocol mirror: {}",
                e.backend(),
                max_abs_diff(&got, &mirror)
            );
        }
    }

    #[test]
    fn layer_refresh_counts_track_norms() {
        let e = clear_engine(50, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let (s, d, f) = (2, 4, 8);
        let w = LayerWeights::random(d, f, &mut rng);
        let x = rand_matrix(&mut rng, s, d, 1.0);
        let pm = pack_columns(&e, &x, s, d).unwrap();

        let cfg = layer_cfg(s, d, 2);
        let before = e.counters().snapshot();
        transformer_layer(&e, &pm, &w, &cfg).unwrap();
        assert_eq!(
            CounterSnapshot::diff(&before, &e.counters().snapshot()).refresh,
            2
        );

        let mut cfg3 = cfg.clone();
        cfg3.final_norm = true;
        let before = e.counters().snapshot();
        transformer_layer(&e, &pm, &w, &cfg3).unwrap();
        assert_eq!(
            CounterSnapshot::diff(&before, &e.counters().snapshot()).refresh,
            3
        );
    }

    #[test]
    fn layer_completes_with_refresh_scoped_to_rmsnorm() {
        use crate::engine::RefreshPolicy;
        let e = clear_engine(50, 4);
        e.set_refresh_policy(RefreshPolicy::ScopedOnly);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let (s, d, f) = (2, 4, 8);
        let w = LayerWeights::random(d, f, &mut rng);
        let x = rand_matrix(&mut rng, s, d, 1.0);
        let pm = pack_columns(&e, &x, s, d).unwrap();
        let cfg = layer_cfg(s, d, 2);
        transformer_layer(&e, &pm, &w, &cfg).unwrap();
        // Outside an rmsnorm scope refreshes stay forbidden.
        assert!(e.refresh(&pm.cols[0]).is_err());
    }
}
