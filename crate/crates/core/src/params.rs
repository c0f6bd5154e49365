//! Backend parameters and modulus-chain selection.
//!
//! All parameter sets here are toy-scale and explicitly insecure; they exist
//! to exercise slot semantics, level budgets and operation counts, not to
//! provide cryptographic protection.

use serde::{Deserialize, Serialize};

use crate::ckks::arith;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Exact plaintext slots; the oracle backend.
    Clear,
    /// Minimal leveled RNS-CKKS.
    Ckks,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::Clear => write!(f, "clear"),
            BackendKind::Ckks => write!(f, "ckks"),
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clear" => Ok(BackendKind::Clear),
            "ckks" => Ok(BackendKind::Ckks),
            other => Err(Error::InvalidParams(format!("unknown backend `{other}`"))),
        }
    }
}

pub const SECURITY_NOTE: &str =
    "toy parameters; deterministic keys and noiseless evaluation keys; NOT secure";

/// Parameters shared by both backends. `ring_degree` is the polynomial degree
/// N'; the slot count is N = N'/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeParams {
    /// Polynomial ring degree N' (power of two).
    pub ring_degree: usize,
    /// Maximum multiplicative level L.
    pub max_level: u16,
    /// Levels consumed by a refresh; refresh resets to `L - K`.
    pub refresh_cost: u16,
    /// log2 of the encoding scale (the scale is an exact power of two).
    pub scale_bits: i16,
    /// log2 of the base prime q0 (decryption headroom).
    pub base_bits: u32,
    /// Standard deviation of the encryption noise (CKKS backend).
    pub error_std: f64,
    /// Empirical per-op slot error bound used by tests and reports.
    pub backend_eps: f64,
    /// Keygen seed; the same seed reproduces the same key material.
    pub seed: u64,
    /// Marks every parameter set produced here as toy/insecure.
    pub security_note: String,
}

impl HeParams {
    pub fn new(ring_degree: usize, max_level: u16, refresh_cost: u16, scale_bits: i16) -> Self {
        HeParams {
            ring_degree,
            max_level,
            refresh_cost,
            scale_bits,
            base_bits: scale_bits as u32 + 14,
            error_std: 3.2,
            backend_eps: 1e-5,
            seed: 0,
            security_note: SECURITY_NOTE.to_string(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Smallest legal ring; handy for exercising contracts.
    pub fn tiny() -> Self {
        HeParams::new(16, 4, 2, 30)
    }

    /// Fast profile for unit tests (N' = 2^10).
    pub fn small() -> Self {
        HeParams::new(1 << 10, 10, 2, 40)
    }

    /// Default profile (N' = 2^12).
    pub fn desk() -> Self {
        HeParams::new(1 << 12, 16, 4, 40)
    }

    /// Profile with enough depth for a full transformer layer between
    /// refreshes (N' = 2^13, effective depth L - K = 32; the data path of a
    /// two-norm layer consumes 31 levels with degree-59 fits).
    pub fn layer() -> Self {
        HeParams::new(1 << 13, 36, 4, 45)
    }

    /// Heavyweight preset (N' = 2^14) with the L = 48, K = 20 budget and its
    /// effective post-refresh depth of 28. Not exercised by the test suite.
    pub fn big() -> Self {
        HeParams::new(1 << 14, 48, 20, 45)
    }

    /// Number of SIMD slots N = N'/2.
    pub fn slot_count(&self) -> usize {
        self.ring_degree / 2
    }

    pub fn scale(&self) -> f64 {
        (self.scale_bits as f64).exp2()
    }

    /// Level after a refresh.
    pub fn refreshed_level(&self) -> u16 {
        self.max_level - self.refresh_cost
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ring_degree.is_power_of_two() || self.ring_degree < 8 {
            return Err(Error::InvalidParams(format!(
                "ring degree {} must be a power of two >= 8",
                self.ring_degree
            )));
        }
        if self.refresh_cost == 0 || self.refresh_cost >= self.max_level {
            return Err(Error::InvalidParams(format!(
                "refresh cost K={} must satisfy 0 < K < L={}",
                self.refresh_cost, self.max_level
            )));
        }
        if self.scale_bits < 20 || self.scale_bits > 50 {
            return Err(Error::InvalidParams(format!(
                "scale_bits {} out of supported range [20, 50]",
                self.scale_bits
            )));
        }
        if self.base_bits <= self.scale_bits as u32 || self.base_bits > 62 {
            return Err(Error::InvalidParams(format!(
                "base_bits {} must lie in (scale_bits, 62]",
                self.base_bits
            )));
        }
        if !(self.error_std >= 0.0 && self.error_std.is_finite()) {
            return Err(Error::InvalidParams(
                "error_std must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// The RNS modulus chain `q_0 .. q_L` (CKKS backend only): `q_0` is a
    /// large base prime, `q_1 .. q_L` are rescale primes chosen as close to
    /// the scale `2^scale_bits` as possible. Every prime is distinct and
    /// `== 1 (mod 2N')` so the ring supports an NTT.
    pub fn modulus_chain(&self) -> Result<Vec<u64>> {
        self.validate()?;
        let m = 2 * self.ring_degree as u64;
        let mut chain = Vec::with_capacity(self.max_level as usize + 1);
        let base = arith::nearest_ntt_primes(1u64 << self.base_bits, m, 1, &chain)?;
        chain.extend(base);
        let rescale =
            arith::nearest_ntt_primes(1u64 << self.scale_bits, m, self.max_level as usize, &chain)?;
        chain.extend(rescale);
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [
            HeParams::tiny(),
            HeParams::small(),
            HeParams::desk(),
            HeParams::layer(),
            HeParams::big(),
        ] {
            p.validate().unwrap();
            assert_eq!(p.slot_count(), p.ring_degree / 2);
        }
        assert_eq!(HeParams::big().refreshed_level(), 28);
    }

    #[test]
    fn refresh_cost_must_be_below_max_level() {
        let mut p = HeParams::tiny();
        p.refresh_cost = p.max_level;
        assert!(p.validate().is_err());
        p.refresh_cost = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn ring_degree_must_be_power_of_two() {
        let mut p = HeParams::small();
        p.ring_degree = 1000;
        assert!(p.validate().is_err());
    }

    #[test]
    fn refresh_arithmetic_at_large_budget() {
        // L = 48, K = 20 leaves an effective depth of 28 after a refresh.
        let mut p = HeParams::desk();
        p.max_level = 48;
        p.refresh_cost = 20;
        assert_eq!(p.refreshed_level(), 28);
    }

    #[test]
    fn modulus_chain_is_ntt_compatible_and_distinct() {
        let p = HeParams::small();
        let chain = p.modulus_chain().unwrap();
        assert_eq!(chain.len(), p.max_level as usize + 1);
        let m = 2 * p.ring_degree as u64;
        let mut seen = std::collections::HashSet::new();
        for &q in &chain {
            assert_eq!(q % m, 1, "prime {q} is not 1 mod 2N'");
            assert!(arith::is_prime(q), "{q} is not prime");
            assert!(seen.insert(q), "duplicate prime {q}");
        }
        // Rescale primes hug the scale tightly enough for drift tracking.
        let scale = p.scale();
        for &q in &chain[1..] {
            let rel = (q as f64 - scale).abs() / scale;
            assert!(rel < 1e-4, "prime {q} is {rel:.2e} away from the scale");
        }
    }

    #[test]
    fn modulus_chain_deterministic() {
        let p = HeParams::desk();
        assert_eq!(p.modulus_chain().unwrap(), p.modulus_chain().unwrap());
    }
}
