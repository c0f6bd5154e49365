//! Encrypted matrix kernels over column-packed matrices.
//!
//! * `pcmm` — plaintext-ciphertext product against a ternary weight matrix,
//!   built purely from ciphertext additions and subtractions (level cost 0).
//! * `extract_broadcast` — replicates one slot of a ciphertext across a span
//!   with one mask multiplication and `ceil(log2 span)` rotations (a naive
//!   linear-rotation variant is kept for comparison).
//! * `ccmm` — ciphertext-ciphertext product as a sum of outer products,
//!   extracting right-hand elements by broadcast (level cost 2).
//! * `hadamard_pc` / `hadamard_cc` — slotwise products (level cost 1).

use serde::{Deserialize, Serialize};

use crate::engine::{Ciphertext, Engine};
use crate::error::{Error, Result};
use crate::metrics::{self, CounterSnapshot, StageRecord};
use crate::packing::{PackedMatrix, TernaryMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionStrategy {
    /// Mask, then rotate-and-add doubling: `ceil(log2 span)` rotations.
    #[default]
    Logarithmic,
    /// Mask, then one single-step rotation per copy: `span - 1` rotations.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// The source is the right-hand matrix itself: B[j][i] sits at slot j of
    /// column i.
    Direct,
    /// The right-hand matrix is the transpose of the source: B[j][i] sits at
    /// slot i of column j.
    Transposed,
}

/// Resolves logical indices of the right-hand CCMM operand onto (ciphertext,
/// slot) coordinates of a column-packed source.
#[derive(Clone, Copy)]
pub struct ElementAccessor<'a> {
    pub source: &'a PackedMatrix,
    pub orientation: Orientation,
}

impl<'a> ElementAccessor<'a> {
    pub fn direct(source: &'a PackedMatrix) -> Self {
        ElementAccessor {
            source,
            orientation: Orientation::Direct,
        }
    }

    pub fn transposed(source: &'a PackedMatrix) -> Self {
        ElementAccessor {
            source,
            orientation: Orientation::Transposed,
        }
    }

    /// Rows of the operand B (the contraction dimension).
    pub fn contract_dim(&self) -> usize {
        match self.orientation {
            Orientation::Direct => self.source.nrows(),
            Orientation::Transposed => self.source.ncols(),
        }
    }

    /// Columns of the operand B (output columns).
    pub fn out_cols(&self) -> usize {
        match self.orientation {
            Orientation::Direct => self.source.ncols(),
            Orientation::Transposed => self.source.nrows(),
        }
    }

    /// (ciphertext index, slot index) holding B[j][i].
    pub fn resolve(&self, j: usize, i: usize) -> Result<(usize, usize)> {
        if j >= self.contract_dim() || i >= self.out_cols() {
            return Err(Error::DimensionMismatch(format!(
                "accessor index ({j}, {i}) outside {}x{}",
                self.contract_dim(),
                self.out_cols()
            )));
        }
        Ok(match self.orientation {
            Orientation::Direct => (i, j),
            Orientation::Transposed => (j, i),
        })
    }

    pub fn level(&self) -> u16 {
        self.source.level()
    }
}

/// Multiplication-free plaintext-ciphertext matmul: output column i is the
/// signed sum of input columns selected by the ternary weights. Consumes no
/// levels and issues no Mult/PMult/Rot.
pub fn pcmm(engine: &Engine, x: &PackedMatrix, w: &TernaryMatrix) -> Result<PackedMatrix> {
    if x.ncols() != w.rows {
        return Err(Error::DimensionMismatch(format!(
            "pcmm: {}x{} input against {}x{} weights",
            x.nrows(),
            x.ncols(),
            w.rows,
            w.cols
        )));
    }
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (x.level(), x.consumed());

    let mut out_cols = Vec::with_capacity(w.cols);
    for i in 0..w.cols {
        let mut acc: Option<Ciphertext> = None;
        for j in 0..w.rows {
            match w.get(j, i) {
                0 => continue,
                1 => {
                    acc = Some(match acc {
                        None => x.cols[j].clone(),
                        Some(prev) => engine.add(&prev, &x.cols[j])?,
                    });
                }
                _ => {
                    acc = Some(match acc {
                        None => engine.sub(&engine.zero_at(x.cols[j].level()), &x.cols[j])?,
                        Some(prev) => engine.sub(&prev, &x.cols[j])?,
                    });
                }
            }
        }
        out_cols.push(acc.unwrap_or_else(|| engine.zero_at(x.level())));
    }
    let out = PackedMatrix {
        cols: out_cols,
        rows: x.nrows(),
    };
    engine.tracker().record(StageRecord {
        label: "pcmm".into(),
        levels: out.consumed().saturating_sub(entry.1),
        entry_level: entry.0,
        exit_level: out.level(),
        counters: CounterSnapshot::diff(&before, &engine.counters().snapshot()),
        wall_ms: metrics::wall_ms(start),
        note: Some(format!("s={} d={} m={}", x.nrows(), w.rows, w.cols)),
    });
    Ok(out)
}

/// Replicates the value at `slot` across slots `0..span`, optionally folding
/// a scalar into the selection mask at no extra level. Costs one PMult plus
/// `ceil(log2 span)` rotations and as many additions (logarithmic mode).
/// Slots at `span..` may hold further copies; callers pair the result with
/// zero-padded operands.
pub fn extract_broadcast(
    engine: &Engine,
    ct: &Ciphertext,
    slot: usize,
    span: usize,
    fold: Option<f64>,
) -> Result<Ciphertext> {
    extract_broadcast_with(
        engine,
        ct,
        slot,
        span,
        fold,
        ExtractionStrategy::Logarithmic,
    )
}

pub fn extract_broadcast_with(
    engine: &Engine,
    ct: &Ciphertext,
    slot: usize,
    span: usize,
    fold: Option<f64>,
    strategy: ExtractionStrategy,
) -> Result<Ciphertext> {
    let n = engine.slot_count();
    if !(slot < span && span <= n) {
        return Err(Error::DimensionMismatch(format!(
            "extract_broadcast needs slot < span <= N, got slot={slot}, span={span}, N={n}"
        )));
    }
    let mut mask = vec![0.0; slot + 1];
    mask[slot] = fold.unwrap_or(1.0);
    let pt = engine.encode(&mask, ct.level(), engine.params().scale_bits)?;
    let selected = engine.pmult(ct, &pt)?;

    match strategy {
        ExtractionStrategy::Logarithmic => {
            // Rotate-and-add doubling steered by the bits of `slot`: after
            // processing bit j the copies occupy slot - (slot mod 2^(j+1))
            // .. plus offsets, ending with exactly one copy in each of
            // 0..2^ceil(log2 span).
            let steps = usize::BITS - (span - 1).leading_zeros();
            let mut acc = selected;
            for j in 0..steps {
                let amount = 1i64 << j;
                let dir = if slot >> j & 1 == 1 { amount } else { -amount };
                let rotated = engine.rotate(&acc, dir)?;
                acc = engine.add(&acc, &rotated)?;
            }
            Ok(acc)
        }
        ExtractionStrategy::Naive => {
            // One single-step rotation per target position.
            let mut acc = selected.clone();
            let mut walk = selected.clone();
            for _ in 0..slot {
                walk = engine.rotate(&walk, 1)?;
                acc = engine.add(&acc, &walk)?;
            }
            walk = selected;
            for _ in 0..span - 1 - slot {
                walk = engine.rotate(&walk, -1)?;
                acc = engine.add(&acc, &walk)?;
            }
            Ok(acc)
        }
    }
}

/// Ciphertext-ciphertext matmul via outer products: output column i
/// accumulates `a_j * broadcast(B[j][i])` over the contraction dimension.
/// Costs two levels (extraction mask + product); `scale_fold` rides along in
/// the mask for free.
pub fn ccmm(
    engine: &Engine,
    a: &PackedMatrix,
    b: &ElementAccessor,
    scale_fold: Option<f64>,
) -> Result<PackedMatrix> {
    ccmm_with(engine, a, b, scale_fold, ExtractionStrategy::Logarithmic)
}

pub fn ccmm_with(
    engine: &Engine,
    a: &PackedMatrix,
    b: &ElementAccessor,
    scale_fold: Option<f64>,
    strategy: ExtractionStrategy,
) -> Result<PackedMatrix> {
    let d = b.contract_dim();
    let m = b.out_cols();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "ccmm: {}x{} against a {}x{} operand",
            a.nrows(),
            a.ncols(),
            d,
            m
        )));
    }
    let s = a.nrows();
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry_consumed = a.consumed().max(b.source.consumed());
    let entry_level = a.level().min(b.level());

    let mut out_cols = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc: Option<Ciphertext> = None;
        for j in 0..d {
            let (col, slot) = b.resolve(j, i)?;
            // The broadcast must reach every live row of `a`; slots past the
            // row span meet zero padding in the product.
            let span = s.max(slot + 1);
            let attribute = |e: Error| match e {
                Error::DepthExceeded {
                    context,
                    required,
                    available,
                } => Error::DepthExceeded {
                    context: format!("ccmm column {i} term {j}: {context}"),
                    required,
                    available,
                },
                other => other,
            };
            let broadcast = extract_broadcast_with(
                engine,
                &b.source.cols[col],
                slot,
                span,
                scale_fold,
                strategy,
            )
            .map_err(attribute)?;
            let term = engine.mult(&a.cols[j], &broadcast).map_err(attribute)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => engine.add(&prev, &term)?,
            });
        }
        out_cols.push(acc.expect("contract dim >= 1"));
    }
    let out = PackedMatrix {
        cols: out_cols,
        rows: s,
    };
    engine.tracker().record(StageRecord {
        label: "ccmm".into(),
        levels: out.consumed().saturating_sub(entry_consumed),
        entry_level,
        exit_level: out.level(),
        counters: CounterSnapshot::diff(&before, &engine.counters().snapshot()),
        wall_ms: metrics::wall_ms(start),
        note: Some(format!("s={s} d={d} m={m}")),
    });
    Ok(out)
}

/// Slotwise product of every column with one plaintext per-slot vector.
/// Costs one level (d plaintext multiplications).
pub fn hadamard_pc(engine: &Engine, pm: &PackedMatrix, v: &[f64]) -> Result<PackedMatrix> {
    if v.len() < pm.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "hadamard_pc: vector of {} against {} rows",
            v.len(),
            pm.nrows()
        )));
    }
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (pm.level(), pm.consumed());
    let pt = engine.encode(v, pm.level(), engine.params().scale_bits)?;
    let cols = pm
        .cols
        .iter()
        .map(|c| engine.pmult(c, &pt))
        .collect::<Result<Vec<_>>>()?;
    let out = PackedMatrix {
        cols,
        rows: pm.nrows(),
    };
    engine.tracker().record(StageRecord {
        label: "hadamard_pc".into(),
        levels: out.consumed().saturating_sub(entry.1),
        entry_level: entry.0,
        exit_level: out.level(),
        counters: CounterSnapshot::diff(&before, &engine.counters().snapshot()),
        wall_ms: metrics::wall_ms(start),
        note: None,
    });
    Ok(out)
}

/// Columnwise slotwise product of two packed matrices. Costs one level
/// (d ciphertext multiplications).
pub fn hadamard_cc(engine: &Engine, a: &PackedMatrix, b: &PackedMatrix) -> Result<PackedMatrix> {
    if a.ncols() != b.ncols() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "hadamard_cc: {}x{} against {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (a.level().min(b.level()), a.consumed().max(b.consumed()));
    let cols = a
        .cols
        .iter()
        .zip(&b.cols)
        .map(|(x, y)| engine.mult(x, y))
        .collect::<Result<Vec<_>>>()?;
    let out = PackedMatrix {
        cols,
        rows: a.nrows(),
    };
    engine.tracker().record(StageRecord {
        label: "hadamard_cc".into(),
        levels: out.consumed().saturating_sub(entry.1),
        entry_level: entry.0,
        exit_level: out.level(),
        counters: CounterSnapshot::diff(&before, &engine.counters().snapshot()),
        wall_ms: metrics::wall_ms(start),
        note: None,
    });
    Ok(out)
}
