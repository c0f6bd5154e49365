//! Canonical slot embedding for the negacyclic ring.
//!
//! Slot `t` holds the evaluation of the plaintext polynomial at `zeta^(5^t)`,
//! where `zeta` is a primitive 2N'-th complex root of unity. Ordering the
//! evaluation points along the orbit of 5 makes the Galois map `X -> X^5` act
//! as a cyclic left rotation of the slot vector, which is what the rotation
//! keys implement mod q.

pub struct EmbedTable {
    pub n_prime: usize,
    pub slots: usize,
    /// e_t = 5^t mod 2N' for t < N.
    pub orbit: Vec<u32>,
    /// cos(pi * k / N') for k < 2N'.
    cos_tab: Vec<f64>,
}

impl EmbedTable {
    pub fn new(n_prime: usize) -> Self {
        assert!(n_prime.is_power_of_two() && n_prime >= 8);
        let slots = n_prime / 2;
        let m = 2 * n_prime;
        let mut orbit = Vec::with_capacity(slots);
        let mut e = 1usize;
        for _ in 0..slots {
            orbit.push(e as u32);
            e = (e * 5) % m;
        }
        let cos_tab = (0..m)
            .map(|k| (std::f64::consts::PI * k as f64 / n_prime as f64).cos())
            .collect();
        EmbedTable {
            n_prime,
            slots,
            orbit,
            cos_tab,
        }
    }

    /// Galois element realizing a cyclic left rotation by `r` slots.
    pub fn galois_element(&self, r: usize) -> usize {
        let m = 2 * self.n_prime;
        let mut g = 1usize;
        for _ in 0..(r % self.slots) {
            g = (g * 5) % m;
        }
        g
    }

    /// Real slot vector -> real polynomial coefficients (unscaled).
    /// Short vectors are treated as zero-padded; zero slots are skipped.
    pub fn encode_real(&self, v: &[f64]) -> Vec<f64> {
        debug_assert!(v.len() <= self.slots);
        let n = self.n_prime;
        let m = 2 * n;
        let mut coeffs = vec![0.0f64; n];
        for (t, &val) in v.iter().enumerate() {
            if val == 0.0 {
                continue;
            }
            let step = self.orbit[t] as usize;
            let mut idx = 0usize;
            for c in coeffs.iter_mut() {
                *c += val * self.cos_tab[idx];
                idx += step;
                if idx >= m {
                    idx -= m;
                }
            }
        }
        let norm = 2.0 / n as f64;
        for c in coeffs.iter_mut() {
            *c *= norm;
        }
        coeffs
    }

    /// Real polynomial coefficients -> the first `count` slots.
    pub fn decode_real(&self, coeffs: &[f64], count: usize) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), self.n_prime);
        let m = 2 * self.n_prime;
        let count = count.min(self.slots);
        let mut out = Vec::with_capacity(count);
        for t in 0..count {
            let step = self.orbit[t] as usize;
            let mut idx = 0usize;
            let mut acc = 0.0f64;
            for &c in coeffs.iter() {
                acc += c * self.cos_tab[idx];
                idx += step;
                if idx >= m {
                    idx -= m;
                }
            }
            out.push(acc);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let t = EmbedTable::new(64);
        let v: Vec<f64> = (0..32)
            .map(|i| ((i * 37 + 5) % 17) as f64 / 7.0 - 1.0)
            .collect();
        let coeffs = t.encode_real(&v);
        let back = t.decode_real(&coeffs, 32);
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_vector_is_constant_polynomial() {
        let t = EmbedTable::new(32);
        let coeffs = t.encode_real(&vec![1.5; 16]);
        assert!((coeffs[0] - 1.5).abs() < 1e-9);
        for &c in &coeffs[1..] {
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn short_vectors_pad_with_zeros() {
        let t = EmbedTable::new(32);
        let coeffs = t.encode_real(&[1.0, 2.0, 3.0]);
        let back = t.decode_real(&coeffs, 16);
        assert!((back[0] - 1.0).abs() < 1e-9);
        assert!((back[1] - 2.0).abs() < 1e-9);
        assert!((back[2] - 3.0).abs() < 1e-9);
        for &b in &back[3..] {
            assert!(b.abs() < 1e-9);
        }
    }

    #[test]
    fn galois_five_shifts_orbit() {
        let t = EmbedTable::new(64);
        // Evaluating at zeta^(5 e_t) must equal evaluating at zeta^(e_{t+1}).
        for step in 1..5 {
            let g = t.galois_element(step);
            for i in 0..t.slots - step {
                let m = 2 * t.n_prime;
                assert_eq!(
                    (t.orbit[i] as usize * g) % m,
                    t.orbit[i + step] as usize % m
                );
            }
        }
    }
}
