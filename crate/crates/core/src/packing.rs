//! Column-wise matrix packing: an s x d real matrix becomes d ciphertexts,
//! one per column, with slot i of column j holding X[i][j]. Rows beyond s
//! are zero. Oversize matrices (s > N) are rejected rather than split.

use crate::engine::{Ciphertext, Engine, Plaintext};
use crate::error::{Error, Result};

/// An s x d real matrix held as d column ciphertexts.
#[derive(Debug, Clone)]
pub struct PackedMatrix {
    pub cols: Vec<Ciphertext>,
    pub rows: usize,
}

impl PackedMatrix {
    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn level(&self) -> u16 {
        self.cols.iter().map(|c| c.level()).min().unwrap_or(0)
    }

    pub fn consumed(&self) -> u32 {
        self.cols.iter().map(|c| c.consumed()).max().unwrap_or(0)
    }

    /// Live-slot fraction: s/N per column.
    pub fn slot_utilization(&self, engine: &Engine) -> f64 {
        self.rows as f64 / engine.slot_count() as f64
    }

    pub fn tagged(mut self, tag: &str) -> Self {
        for c in self.cols.iter_mut() {
            c.counter_tag = Some(tag.to_string());
        }
        self
    }
}

/// A d x m weight matrix over {-1, 0, 1}, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMatrix {
    entries: Vec<i8>,
    pub rows: usize,
    pub cols: usize,
}

impl TernaryMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<i8>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "ternary matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|&&e| !(-1..=1).contains(&e)) {
            return Err(Error::DimensionMismatch(format!(
                "ternary entry {bad} outside {{-1, 0, 1}}"
            )));
        }
        Ok(TernaryMatrix {
            entries,
            rows,
            cols,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TernaryMatrix {
            entries: vec![0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn random<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        TernaryMatrix {
            entries: (0..rows * cols).map(|_| rng.gen_range(-1i8..=1)).collect(),
            rows,
            cols,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.entries[row * self.cols + col]
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    /// Row-major f64 copy, for the plaintext oracles.
    pub fn to_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&e| e as f64).collect()
    }
}

/// Encrypts `x` (row-major, s x d) column by column.
pub fn pack_columns(engine: &Engine, x: &[f64], rows: usize, cols: usize) -> Result<PackedMatrix> {
    if x.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "matrix {rows}x{cols} needs {} entries, got {}",
            rows * cols,
            x.len()
        )));
    }
    if rows > engine.slot_count() {
        return Err(Error::SlotOverflow {
            len: rows,
            slots: engine.slot_count(),
        });
    }
    let mut packed = Vec::with_capacity(cols);
    for j in 0..cols {
        let column: Vec<f64> = (0..rows).map(|i| x[i * cols + j]).collect();
        let pt = engine.encode_default(&column)?;
        packed.push(engine.encrypt(&pt)?);
    }
    Ok(PackedMatrix { cols: packed, rows })
}

/// Decrypts a packed matrix back to row-major s x d. Requires the secret key.
pub fn unpack(engine: &Engine, pm: &PackedMatrix) -> Result<Vec<f64>> {
    let (s, d) = (pm.nrows(), pm.ncols());
    let mut out = vec![0.0; s * d];
    for (j, col) in pm.cols.iter().enumerate() {
        let slots = engine.decrypt(col)?;
        for i in 0..s {
            out[i * d + j] = slots[i];
        }
    }
    Ok(out)
}

/// Plaintext with the scalar `c` in every slot.
pub fn encode_broadcast(engine: &Engine, c: f64, level: u16) -> Result<Plaintext> {
    let v = vec![c; engine.slot_count()];
    engine.encode(&v, level, engine.params().scale_bits)
}

/// Plaintext with `v` in slots 0..len(v) and zeros beyond (per-position
/// tables for RoPE and slotwise folds).
pub fn encode_slotwise(engine: &Engine, v: &[f64], level: u16) -> Result<Plaintext> {
    engine.encode(v, level, engine.params().scale_bits)
}
