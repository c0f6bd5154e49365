//! Negacyclic number-theoretic transform over `Z_q[X]/(X^n + 1)`.
//!
//! The forward transform evaluates a polynomial at the odd powers of a
//! primitive 2n-th root of unity psi; pointwise products in that domain are
//! exactly products mod `X^n + 1`. `point_exp[i]` records which power of psi
//! position `i` holds, which is what the slot-rotation permutations are built
//! from.

use std::collections::HashMap;

use super::arith::{add_mod, inv_mod, mul_mod, pow_mod, sub_mod};

#[derive(Debug, Clone)]
pub struct NttTable {
    pub q: u64,
    pub n: usize,
    psi_bitrev: Vec<u64>,
    ipsi_bitrev: Vec<u64>,
    n_inv: u64,
    /// Exponent e such that slot i of the transform holds p(psi^e).
    pub point_exp: Vec<u32>,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// Finds a primitive 2n-th root of unity mod q (requires q == 1 mod 2n).
fn find_psi(q: u64, n: usize) -> u64 {
    let m = 2 * n as u64;
    debug_assert_eq!((q - 1) % m, 0);
    let cofactor = (q - 1) / m;
    for g in 2..q {
        let cand = pow_mod(g, cofactor, q);
        // psi is primitive 2n-th iff psi^n == -1.
        if pow_mod(cand, n as u64, q) == q - 1 {
            return cand;
        }
    }
    unreachable!("no primitive root found for q={q}, n={n}")
}

impl NttTable {
    pub fn new(q: u64, n: usize) -> Self {
        assert!(n.is_power_of_two());
        let bits = n.trailing_zeros();
        let psi = find_psi(q, n);
        let ipsi = inv_mod(psi, q);
        let mut psi_bitrev = vec![0u64; n];
        let mut ipsi_bitrev = vec![0u64; n];
        let mut p = 1u64;
        let mut ip = 1u64;
        for i in 0..n {
            psi_bitrev[bit_reverse(i, bits)] = p;
            ipsi_bitrev[bit_reverse(i, bits)] = ip;
            p = mul_mod(p, psi, q);
            ip = mul_mod(ip, ipsi, q);
        }
        let n_inv = inv_mod(n as u64, q);
        let mut table = NttTable {
            q,
            n,
            psi_bitrev,
            ipsi_bitrev,
            n_inv,
            point_exp: Vec::new(),
        };
        table.point_exp = table.recover_point_exponents(psi);
        table
    }

    /// Transforms the monomial X and matches each output value against the
    /// powers of psi. This pins down the evaluation-point layout without
    /// relying on the butterfly ordering convention.
    fn recover_point_exponents(&self, psi: u64) -> Vec<u32> {
        let m = 2 * self.n;
        let mut pow_to_exp = HashMap::with_capacity(m);
        let mut p = 1u64;
        for e in 0..m as u32 {
            pow_to_exp.insert(p, e);
            p = mul_mod(p, psi, self.q);
        }
        let mut mono = vec![0u64; self.n];
        mono[1] = 1;
        self.forward(&mut mono);
        mono.iter()
            .map(|v| *pow_to_exp.get(v).expect("NTT point is a power of psi"))
            .collect()
    }

    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t /= 2;
            for i in 0..m {
                let j1 = 2 * i * t;
                let s = self.psi_bitrev[m + i];
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = mul_mod(a[j + t], s, q);
                    a[j] = add_mod(u, v, q);
                    a[j + t] = sub_mod(u, v, q);
                }
            }
            m *= 2;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m / 2;
            let mut j1 = 0;
            for i in 0..h {
                let s = self.ipsi_bitrev[h + i];
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = a[j + t];
                    a[j] = add_mod(u, v, q);
                    a[j + t] = mul_mod(sub_mod(u, v, q), s, q);
                }
                j1 += 2 * t;
            }
            t *= 2;
            m = h;
        }
        for x in a.iter_mut() {
            *x = mul_mod(*x, self.n_inv, q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly_mul_ref(a: &[u64], b: &[u64], q: u64) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0i128; n];
        for i in 0..n {
            for j in 0..n {
                let p = (a[i] as i128) * (b[j] as i128) % q as i128;
                if i + j < n {
                    out[i + j] = (out[i + j] + p) % q as i128;
                } else {
                    out[i + j - n] = (out[i + j - n] - p).rem_euclid(q as i128);
                }
            }
        }
        out.iter()
            .map(|&x| x.rem_euclid(q as i128) as u64)
            .collect()
    }

    #[test]
    fn roundtrip() {
        let q = super::super::arith::nearest_ntt_primes(1 << 40, 64, 1, &[]).unwrap()[0];
        let t = NttTable::new(q, 32);
        let orig: Vec<u64> = (0..32u64).map(|i| i * 1234567 % q).collect();
        let mut a = orig.clone();
        t.forward(&mut a);
        t.inverse(&mut a);
        assert_eq!(a, orig);
    }

    #[test]
    fn pointwise_is_negacyclic_product() {
        let q = super::super::arith::nearest_ntt_primes(1 << 30, 32, 1, &[]).unwrap()[0];
        let t = NttTable::new(q, 16);
        let a: Vec<u64> = (0..16u64).map(|i| (i * 7 + 1) % q).collect();
        let b: Vec<u64> = (0..16u64).map(|i| (i * 13 + 5) % q).collect();
        let expect = poly_mul_ref(&a, &b, q);
        let mut fa = a.clone();
        let mut fb = b.clone();
        t.forward(&mut fa);
        t.forward(&mut fb);
        let mut fc: Vec<u64> = fa
            .iter()
            .zip(&fb)
            .map(|(&x, &y)| mul_mod(x, y, q))
            .collect();
        t.inverse(&mut fc);
        assert_eq!(fc, expect);
    }

    #[test]
    fn x_pow_n_is_minus_one() {
        // X^n == -1 in the ring: multiply X^(n-1) by X.
        let q = super::super::arith::nearest_ntt_primes(1 << 30, 32, 1, &[]).unwrap()[0];
        let n = 16;
        let t = NttTable::new(q, n);
        let mut a = vec![0u64; n];
        a[n - 1] = 1;
        let mut b = vec![0u64; n];
        b[1] = 1;
        t.forward(&mut a);
        t.forward(&mut b);
        let mut c: Vec<u64> = a.iter().zip(&b).map(|(&x, &y)| mul_mod(x, y, q)).collect();
        t.inverse(&mut c);
        assert_eq!(c[0], q - 1);
        assert!(c[1..].iter().all(|&x| x == 0));
    }

    #[test]
    fn point_exponents_are_odd_and_distinct() {
        let q = super::super::arith::nearest_ntt_primes(1 << 30, 64, 1, &[]).unwrap()[0];
        let t = NttTable::new(q, 32);
        let mut seen = std::collections::HashSet::new();
        for &e in &t.point_exp {
            assert_eq!(e % 2, 1, "NTT points must be odd powers of psi");
            assert!(seen.insert(e));
        }
    }
}
