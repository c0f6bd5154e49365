//! Minimal leveled RNS-CKKS backend.
//!
//! Ciphertexts are pairs of polynomials in `Z_Q[X]/(X^N' + 1)` held in NTT
//! form, one u64 limb per chain prime; level `l` means limbs `q_0 .. q_l` are
//! live. One rescale per multiplication drops the top limb. Key switching
//! uses undecomposed, noiseless evaluation keys: with toy parameters the
//! switch is exact, which keeps rotations and relinearisation cheap and
//! avoids hybrid key-switching machinery. Encryption noise itself is sampled
//! honestly (configurable sigma).

pub mod arith;
pub mod embed;
pub mod ntt;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::params::HeParams;
use arith::{add_mod, inv_mod, mul_mod, neg_mod, sub_mod};
use embed::EmbedTable;
use ntt::NttTable;

/// A polynomial in NTT form, one limb per live chain prime.
#[derive(Debug, Clone, PartialEq)]
pub struct RnsPoly {
    pub limbs: Vec<Vec<u64>>,
}

impl RnsPoly {
    pub fn level(&self) -> usize {
        self.limbs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.limbs.iter().all(|l| l.iter().all(|&x| x == 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkksCiphertext {
    pub c0: RnsPoly,
    pub c1: RnsPoly,
}

impl CkksCiphertext {
    pub fn level(&self) -> usize {
        self.c0.level()
    }
}

/// One key-switching key: an undecomposed encryption of a source secret
/// under the main secret, with zero key noise.
#[derive(Debug, Clone)]
pub struct KskKey {
    pub b: RnsPoly,
    pub a: RnsPoly,
}

#[derive(Debug, Clone)]
pub struct CkksSecretKey {
    pub s: RnsPoly,
}

#[derive(Debug, Clone)]
pub struct CkksPublicKey {
    pub b: RnsPoly,
    pub a: RnsPoly,
}

#[derive(Debug, Clone)]
pub struct CkksKeySet {
    pub public: CkksPublicKey,
    pub relin: KskKey,
    /// Rotation keys per signed slot step (powers of two and +-1).
    pub rot: BTreeMap<i64, KskKey>,
}

pub struct CkksContext {
    pub n_prime: usize,
    pub slots: usize,
    pub chain: Vec<u64>,
    pub tables: Vec<NttTable>,
    pub embed: EmbedTable,
    /// Structural evaluation-point exponents, identical across primes.
    point_exp: Vec<u32>,
    exp_to_idx: Vec<u32>,
    galois_perms: Mutex<HashMap<usize, Arc<Vec<u32>>>>,
}

impl CkksContext {
    pub fn new(params: &HeParams) -> Result<Self> {
        let chain = params.modulus_chain()?;
        let n = params.ring_degree;
        let tables: Vec<NttTable> = chain.iter().map(|&q| NttTable::new(q, n)).collect();
        let point_exp = tables[0].point_exp.clone();
        for t in &tables[1..] {
            debug_assert_eq!(
                t.point_exp, point_exp,
                "NTT point layout must be structural"
            );
        }
        let mut exp_to_idx = vec![u32::MAX; 2 * n];
        for (i, &e) in point_exp.iter().enumerate() {
            exp_to_idx[e as usize] = i as u32;
        }
        Ok(CkksContext {
            n_prime: n,
            slots: n / 2,
            chain,
            tables,
            embed: EmbedTable::new(n),
            point_exp,
            exp_to_idx,
            galois_perms: Mutex::new(HashMap::new()),
        })
    }

    // ── polynomial helpers ────────────────────────────────────────────────

    pub fn poly_zero(&self, level: usize) -> RnsPoly {
        RnsPoly {
            limbs: vec![vec![0u64; self.n_prime]; level + 1],
        }
    }

    /// Signed integer coefficients -> NTT-form RNS polynomial at `level`.
    pub fn poly_from_int_coeffs(&self, coeffs: &[i64], level: usize) -> RnsPoly {
        let mut limbs = Vec::with_capacity(level + 1);
        for (i, &q) in self.chain[..=level].iter().enumerate() {
            let mut limb: Vec<u64> = coeffs
                .iter()
                .map(|&c| (c as i128).rem_euclid(q as i128) as u64)
                .collect();
            self.tables[i].forward(&mut limb);
            limbs.push(limb);
        }
        RnsPoly { limbs }
    }

    /// Centered coefficients of a (small-magnitude) polynomial, via a
    /// two-limb CRT lift. Exact while |coeff| < q0*q1/2, which the scale
    /// headroom guarantees.
    pub fn poly_to_centered_coeffs(&self, poly: &RnsPoly) -> Vec<f64> {
        let mut l0 = poly.limbs[0].clone();
        self.tables[0].inverse(&mut l0);
        let q0 = self.chain[0];
        if poly.limbs.len() == 1 {
            return l0
                .iter()
                .map(|&v| {
                    if v > q0 / 2 {
                        v as f64 - q0 as f64
                    } else {
                        v as f64
                    }
                })
                .collect();
        }
        let mut l1 = poly.limbs[1].clone();
        self.tables[1].inverse(&mut l1);
        let q1 = self.chain[1];
        let q0_inv_mod_q1 = inv_mod(q0 % q1, q1);
        let q01 = q0 as u128 * q1 as u128;
        let half = q01 / 2;
        l0.iter()
            .zip(&l1)
            .map(|(&v0, &v1)| {
                let diff = sub_mod(v1 % q1, v0 % q1, q1);
                let k = mul_mod(diff, q0_inv_mod_q1, q1);
                let x = v0 as u128 + q0 as u128 * k as u128;
                if x > half {
                    -((q01 - x) as f64)
                } else {
                    x as f64
                }
            })
            .collect()
    }

    pub fn poly_add(&self, a: &RnsPoly, b: &RnsPoly) -> RnsPoly {
        debug_assert_eq!(a.limbs.len(), b.limbs.len());
        let limbs = a
            .limbs
            .iter()
            .zip(&b.limbs)
            .enumerate()
            .map(|(i, (la, lb))| {
                let q = self.chain[i];
                la.iter().zip(lb).map(|(&x, &y)| add_mod(x, y, q)).collect()
            })
            .collect();
        RnsPoly { limbs }
    }

    pub fn poly_sub(&self, a: &RnsPoly, b: &RnsPoly) -> RnsPoly {
        debug_assert_eq!(a.limbs.len(), b.limbs.len());
        let limbs = a
            .limbs
            .iter()
            .zip(&b.limbs)
            .enumerate()
            .map(|(i, (la, lb))| {
                let q = self.chain[i];
                la.iter().zip(lb).map(|(&x, &y)| sub_mod(x, y, q)).collect()
            })
            .collect();
        RnsPoly { limbs }
    }

    pub fn poly_neg(&self, a: &RnsPoly) -> RnsPoly {
        let limbs = a
            .limbs
            .iter()
            .enumerate()
            .map(|(i, la)| {
                let q = self.chain[i];
                la.iter().map(|&x| neg_mod(x, q)).collect()
            })
            .collect();
        RnsPoly { limbs }
    }

    pub fn poly_mul(&self, a: &RnsPoly, b: &RnsPoly) -> RnsPoly {
        debug_assert_eq!(a.limbs.len(), b.limbs.len());
        let limbs = a
            .limbs
            .iter()
            .zip(&b.limbs)
            .enumerate()
            .map(|(i, (la, lb))| {
                let q = self.chain[i];
                la.iter().zip(lb).map(|(&x, &y)| mul_mod(x, y, q)).collect()
            })
            .collect();
        RnsPoly { limbs }
    }

    fn poly_mul_acc(&self, acc: &mut RnsPoly, a: &RnsPoly, b: &RnsPoly) {
        for i in 0..acc.limbs.len() {
            let q = self.chain[i];
            let (dst, la, lb) = (&mut acc.limbs[i], &a.limbs[i], &b.limbs[i]);
            for j in 0..dst.len() {
                dst[j] = add_mod(dst[j], mul_mod(la[j], lb[j], q), q);
            }
        }
    }

    pub fn poly_mod_switch(&self, a: &RnsPoly, level: usize) -> RnsPoly {
        debug_assert!(level < a.limbs.len());
        RnsPoly {
            limbs: a.limbs[..=level].to_vec(),
        }
    }

    // ── sampling ──────────────────────────────────────────────────────────

    fn sample_ternary_coeffs(&self, rng: &mut ChaCha20Rng) -> Vec<i64> {
        (0..self.n_prime)
            .map(|_| rng.gen_range(-1i64..=1))
            .collect()
    }

    fn sample_gaussian_coeffs(&self, rng: &mut ChaCha20Rng, std: f64) -> Vec<i64> {
        if std == 0.0 {
            return vec![0i64; self.n_prime];
        }
        (0..self.n_prime)
            .map(|_| {
                // Box-Muller with rejection of the log(0) corner case.
                let mut u1: f64 = rng.gen();
                while u1 <= f64::MIN_POSITIVE {
                    u1 = rng.gen();
                }
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                (z * std).round() as i64
            })
            .collect()
    }

    fn sample_uniform_ntt(&self, rng: &mut ChaCha20Rng, level: usize) -> RnsPoly {
        let limbs = self.chain[..=level]
            .iter()
            .map(|&q| (0..self.n_prime).map(|_| rng.gen_range(0..q)).collect())
            .collect();
        RnsPoly { limbs }
    }

    // ── keys ──────────────────────────────────────────────────────────────

    pub fn keygen(&self, rng: &mut ChaCha20Rng, error_std: f64) -> (CkksSecretKey, CkksKeySet) {
        let top = self.chain.len() - 1;
        let s = self.poly_from_int_coeffs(&self.sample_ternary_coeffs(rng), top);

        // pk = (-a s + e, a)
        let a = self.sample_uniform_ntt(rng, top);
        let e = self.poly_from_int_coeffs(&self.sample_gaussian_coeffs(rng, error_std), top);
        let b = self.poly_add(&self.poly_neg(&self.poly_mul(&a, &s)), &e);
        let public = CkksPublicKey { b, a };

        // Relinearisation key encrypts s^2 with zero key noise.
        let relin = self.make_ksk(&self.poly_mul(&s, &s), &s, rng);

        // Rotation keys for +-2^k steps (k < log2 N) plus +-1.
        let mut rot = BTreeMap::new();
        let mut steps: Vec<i64> = vec![1, -1];
        let mut p = 2i64;
        while (p as usize) < self.slots {
            steps.push(p);
            steps.push(-p);
            p *= 2;
        }
        for step in steps {
            let g = self.galois_for_step(step);
            let perm = self.galois_perm(g);
            let s_rot = self.permute_poly(&s, &perm);
            rot.insert(step, self.make_ksk(&s_rot, &s, rng));
        }

        (CkksSecretKey { s }, CkksKeySet { public, relin, rot })
    }

    fn make_ksk(&self, source: &RnsPoly, s: &RnsPoly, rng: &mut ChaCha20Rng) -> KskKey {
        let top = self.chain.len() - 1;
        let a = self.sample_uniform_ntt(rng, top);
        let b = self.poly_add(&self.poly_neg(&self.poly_mul(&a, s)), source);
        KskKey { b, a }
    }

    // ── encryption ────────────────────────────────────────────────────────

    pub fn encrypt(
        &self,
        pk: &CkksPublicKey,
        msg: &RnsPoly,
        rng: &mut ChaCha20Rng,
        error_std: f64,
    ) -> CkksCiphertext {
        let level = msg.level();
        let u = self.poly_mod_switch(
            &self.poly_from_int_coeffs(&self.sample_ternary_coeffs(rng), level),
            level,
        );
        let e0 = self.poly_from_int_coeffs(&self.sample_gaussian_coeffs(rng, error_std), level);
        let e1 = self.poly_from_int_coeffs(&self.sample_gaussian_coeffs(rng, error_std), level);
        let pk_b = self.poly_mod_switch(&pk.b, level);
        let pk_a = self.poly_mod_switch(&pk.a, level);
        let c0 = self.poly_add(&self.poly_add(&self.poly_mul(&pk_b, &u), &e0), msg);
        let c1 = self.poly_add(&self.poly_mul(&pk_a, &u), &e1);
        CkksCiphertext { c0, c1 }
    }

    /// Noise-free ciphertext (c1 = 0); used by the simulated refresh.
    pub fn trivial_encrypt(&self, msg: RnsPoly) -> CkksCiphertext {
        let level = msg.level();
        CkksCiphertext {
            c1: self.poly_zero(level),
            c0: msg,
        }
    }

    pub fn decrypt(&self, sk: &CkksSecretKey, ct: &CkksCiphertext) -> Vec<f64> {
        let level = ct.level();
        let s = self.poly_mod_switch(&sk.s, level);
        let m = self.poly_add(&ct.c0, &self.poly_mul(&ct.c1, &s));
        self.poly_to_centered_coeffs(&m)
    }

    // ── homomorphic ops ───────────────────────────────────────────────────

    pub fn ct_add(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> CkksCiphertext {
        CkksCiphertext {
            c0: self.poly_add(&a.c0, &b.c0),
            c1: self.poly_add(&a.c1, &b.c1),
        }
    }

    pub fn ct_sub(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> CkksCiphertext {
        CkksCiphertext {
            c0: self.poly_sub(&a.c0, &b.c0),
            c1: self.poly_sub(&a.c1, &b.c1),
        }
    }

    pub fn ct_add_plain(&self, a: &CkksCiphertext, p: &RnsPoly) -> CkksCiphertext {
        CkksCiphertext {
            c0: self.poly_add(&a.c0, p),
            c1: a.c1.clone(),
        }
    }

    pub fn ct_mod_switch(&self, a: &CkksCiphertext, level: usize) -> CkksCiphertext {
        CkksCiphertext {
            c0: self.poly_mod_switch(&a.c0, level),
            c1: self.poly_mod_switch(&a.c1, level),
        }
    }

    /// Tensor + relinearise at the common level; the caller rescales.
    pub fn ct_mul(&self, a: &CkksCiphertext, b: &CkksCiphertext, relin: &KskKey) -> CkksCiphertext {
        let level = a.level();
        debug_assert_eq!(level, b.level());
        let d0 = self.poly_mul(&a.c0, &b.c0);
        let mut d1 = self.poly_mul(&a.c0, &b.c1);
        self.poly_mul_acc(&mut d1, &a.c1, &b.c0);
        let d2 = self.poly_mul(&a.c1, &b.c1);
        let rk_b = self.poly_mod_switch(&relin.b, level);
        let rk_a = self.poly_mod_switch(&relin.a, level);
        CkksCiphertext {
            c0: self.poly_add(&d0, &self.poly_mul(&d2, &rk_b)),
            c1: self.poly_add(&d1, &self.poly_mul(&d2, &rk_a)),
        }
    }

    pub fn ct_mul_plain(&self, a: &CkksCiphertext, p: &RnsPoly) -> CkksCiphertext {
        CkksCiphertext {
            c0: self.poly_mul(&a.c0, p),
            c1: self.poly_mul(&a.c1, p),
        }
    }

    /// Drops the top limb, dividing the underlying integers by q_top with
    /// centered rounding. Works on NTT-form limbs: the top limb is brought to
    /// coefficient form once, then re-reduced into each remaining limb.
    pub fn ct_rescale(&self, a: &CkksCiphertext) -> CkksCiphertext {
        CkksCiphertext {
            c0: self.poly_rescale(&a.c0),
            c1: self.poly_rescale(&a.c1),
        }
    }

    fn poly_rescale(&self, a: &RnsPoly) -> RnsPoly {
        let top = a.limbs.len() - 1;
        debug_assert!(top >= 1, "cannot rescale at level 0");
        let q_top = self.chain[top];
        let mut top_coeffs = a.limbs[top].clone();
        self.tables[top].inverse(&mut top_coeffs);
        // Centered representative => rounded division.
        let centered: Vec<i64> = top_coeffs
            .iter()
            .map(|&v| {
                if v > q_top / 2 {
                    v as i64 - q_top as i64
                } else {
                    v as i64
                }
            })
            .collect();
        let mut limbs = Vec::with_capacity(top);
        for j in 0..top {
            let q = self.chain[j];
            let inv_qtop = inv_mod(q_top % q, q);
            let mut corr: Vec<u64> = centered
                .iter()
                .map(|&r| (r as i128).rem_euclid(q as i128) as u64)
                .collect();
            self.tables[j].forward(&mut corr);
            let limb = a.limbs[j]
                .iter()
                .zip(&corr)
                .map(|(&c, &r)| mul_mod(sub_mod(c, r, q), inv_qtop, q))
                .collect();
            limbs.push(limb);
        }
        RnsPoly { limbs }
    }

    // ── rotation ──────────────────────────────────────────────────────────

    /// Galois element for a signed slot step (left rotation for positive k).
    pub fn galois_for_step(&self, step: i64) -> usize {
        let r = (step.rem_euclid(self.slots as i64)) as usize;
        self.embed.galois_element(r)
    }

    /// NTT-domain index permutation realizing `X -> X^g`.
    pub fn galois_perm(&self, g: usize) -> Arc<Vec<u32>> {
        let mut cache = self.galois_perms.lock().unwrap();
        if let Some(p) = cache.get(&g) {
            return p.clone();
        }
        let m = 2 * self.n_prime;
        let perm: Vec<u32> = self
            .point_exp
            .iter()
            .map(|&e| {
                let src = (e as usize * g) % m;
                self.exp_to_idx[src]
            })
            .collect();
        let perm = Arc::new(perm);
        cache.insert(g, perm.clone());
        perm
    }

    pub fn permute_poly(&self, a: &RnsPoly, perm: &[u32]) -> RnsPoly {
        let limbs = a
            .limbs
            .iter()
            .map(|limb| perm.iter().map(|&src| limb[src as usize]).collect())
            .collect();
        RnsPoly { limbs }
    }

    /// Applies the Galois map for one keyed rotation step and switches the
    /// result back under the main secret.
    pub fn ct_rotate_step(&self, a: &CkksCiphertext, step: i64, ksk: &KskKey) -> CkksCiphertext {
        let g = self.galois_for_step(step);
        let perm = self.galois_perm(g);
        let rc0 = self.permute_poly(&a.c0, &perm);
        let rc1 = self.permute_poly(&a.c1, &perm);
        let level = a.level();
        let k_b = self.poly_mod_switch(&ksk.b, level);
        let k_a = self.poly_mod_switch(&ksk.a, level);
        CkksCiphertext {
            c0: self.poly_add(&rc0, &self.poly_mul(&rc1, &k_b)),
            c1: self.poly_mul(&rc1, &k_a),
        }
    }

    // ── encode/decode (int-coefficient layer lives in the engine) ─────────

    pub fn round_coeffs(coeffs: &[f64], scale: f64) -> Result<Vec<i64>> {
        coeffs
            .iter()
            .map(|&c| {
                let v = c * scale;
                if !v.is_finite() || v.abs() >= 9.0e18 {
                    Err(Error::InvalidParams(
                        "encoded coefficient exceeds integer range".into(),
                    ))
                } else {
                    Ok(v.round() as i64)
                }
            })
            .collect()
    }
}
