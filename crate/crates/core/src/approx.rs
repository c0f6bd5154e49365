//! Chebyshev fitting (plaintext side) and Paterson-Stockmeyer evaluation
//! (ciphertext side), plus the scalar nonlinear protocols built on them:
//! sigmoid, SiLU, sqrt and inverse.
//!
//! A fitted polynomial of degree n evaluates in exactly
//! `ceil(log2(n+1)) + 1` multiplicative levels (one for the affine map of
//! [a,b] onto [-1,1], the rest for the Chebyshev tree) and at most
//! `2*ceil(sqrt(n+1)) + ceil(log2(n+1))` ciphertext-ciphertext products.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Ciphertext, Engine};
use crate::error::{Error, Result};
use crate::metrics::{self, CounterSnapshot, StageRecord};
use crate::packing::encode_broadcast;

pub const DEFAULT_DEGREE: usize = 59;
pub const SIGMOID_DOMAIN: (f64, f64) = (-16.0, 16.0);
pub const SILU_DOMAIN: (f64, f64) = (-16.0, 16.0);
pub const SQRT_DOMAIN: (f64, f64) = (0.01, 10.0);
pub const INVERSE_DOMAIN: (f64, f64) = (0.01, 10.0);

const FIT_GRID: usize = 10_000;

/// Degree and interval for one fitted nonlinearity; loadable from the run
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxSpec {
    pub degree: usize,
    pub domain: (f64, f64),
}

/// Approximation profile for every nonlinearity in a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    pub sigmoid: ApproxSpec,
    pub silu: ApproxSpec,
    pub sqrt: ApproxSpec,
    pub inverse: ApproxSpec,
}

impl Default for Profiles {
    fn default() -> Self {
        Profiles {
            sigmoid: ApproxSpec {
                degree: DEFAULT_DEGREE,
                domain: SIGMOID_DOMAIN,
            },
            silu: ApproxSpec {
                degree: DEFAULT_DEGREE,
                domain: SILU_DOMAIN,
            },
            sqrt: ApproxSpec {
                degree: DEFAULT_DEGREE,
                domain: SQRT_DOMAIN,
            },
            inverse: ApproxSpec {
                degree: DEFAULT_DEGREE,
                domain: INVERSE_DOMAIN,
            },
        }
    }
}

impl Profiles {
    /// Depth layout with a deeper inverse fit: the sqrt segment of
    /// RMSNorm spends 9 levels (2 + depth 7) and the remainder 10
    /// (depth 8 + 2), for 19 in total.
    pub fn deep_inverse() -> Self {
        Profiles {
            inverse: ApproxSpec {
                degree: 95,
                domain: INVERSE_DOMAIN,
            },
            ..Profiles::default()
        }
    }

    /// Narrows the sqrt/inverse interval around the variance range the
    /// caller guarantees, which is where the fits are accurate.
    pub fn with_norm_domain(mut self, domain: (f64, f64)) -> Self {
        self.sqrt.domain = domain;
        self.inverse.domain = (domain.0.sqrt(), domain.1.sqrt() + 1.0);
        self
    }

    /// RMSNorm level usage under this profile: squares + mean (2), the sqrt
    /// depth, then inverse depth + the two output products.
    pub fn rmsnorm_levels(&self) -> u32 {
        2 + ps_depth(self.sqrt.degree) as u32 + ps_depth(self.inverse.degree) as u32 + 2
    }
}

/// A fitted Chebyshev series on [a, b]. `coeffs` follow the node-sum
/// formula at full weight; evaluation halves c0.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevApprox {
    pub a: f64,
    pub b: f64,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    /// Multiplicative levels consumed by `ps_eval`.
    pub depth: u16,
    /// Measured sup-norm error of the fit on a dense grid over [a, b].
    pub max_fit_error: f64,
}

pub fn ps_depth(degree: usize) -> u16 {
    (usize::BITS - degree.leading_zeros()) as u16 + 1
}

/// Fits `f` on [a, b] with a degree-n Chebyshev series: nodes
/// `x_j = cos(pi (j+0.5)/K)` with K = n+1 mapped onto [a, b], coefficients
/// `c_i = (2/K) sum_j f_j cos(i pi (j+0.5)/K)`.
pub fn cheb_fit(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> Result<ChebyshevApprox> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Approx(format!("invalid interval [{a}, {b}]")));
    }
    if n < 1 {
        return Err(Error::Approx("degree must be at least 1".into()));
    }
    let k = n + 1;
    let mut nodes = Vec::with_capacity(k);
    for j in 0..k {
        let x = (std::f64::consts::PI * (j as f64 + 0.5) / k as f64).cos();
        let t = 0.5 * (b - a) * x + 0.5 * (a + b);
        let v = f(t);
        if !v.is_finite() {
            return Err(Error::Approx(format!(
                "target function is not finite at node {t}"
            )));
        }
        nodes.push(v);
    }
    let mut coeffs = Vec::with_capacity(k);
    for i in 0..k {
        let mut c = 0.0;
        for (j, fj) in nodes.iter().enumerate() {
            c += fj * (i as f64 * std::f64::consts::PI * (j as f64 + 0.5) / k as f64).cos();
        }
        coeffs.push(2.0 * c / k as f64);
    }
    let mut approx = ChebyshevApprox {
        a,
        b,
        degree: n,
        coeffs,
        depth: ps_depth(n),
        max_fit_error: 0.0,
    };
    let mut err = 0.0f64;
    for g in 0..=FIT_GRID {
        let t = a + (b - a) * g as f64 / FIT_GRID as f64;
        err = err.max((approx.eval(t) - f(t)).abs());
    }
    approx.max_fit_error = err;
    Ok(approx)
}

impl ChebyshevApprox {
    /// Direct scalar evaluation by the Clenshaw recurrence (the Horner
    /// analogue for the Chebyshev basis); the reference the encrypted
    /// evaluation is checked against.
    pub fn eval(&self, t: f64) -> f64 {
        let u = (2.0 * t - (self.a + self.b)) / (self.b - self.a);
        let mut d = 0.0f64;
        let mut dd = 0.0f64;
        for &c in self.coeffs.iter().skip(1).rev() {
            let tmp = d;
            d = 2.0 * u * d - dd + c;
            dd = tmp;
        }
        u * d - dd + 0.5 * self.coeffs[0]
    }
}

enum Val {
    Ct(Ciphertext),
    Const(f64),
}

struct PsEvaluator<'e> {
    engine: &'e Engine,
    /// Chebyshev basis polynomials of the affine-mapped input: T[i] sits
    /// `ceil(log2 i) + 1` levels below the raw input.
    basis: HashMap<usize, Ciphertext>,
    /// Flat linear combinations are allowed up to this degree.
    baby_cap: usize,
}

impl PsEvaluator<'_> {
    fn basis_poly(&mut self, i: usize) -> Result<Ciphertext> {
        debug_assert!(i >= 1);
        if let Some(ct) = self.basis.get(&i) {
            return Ok(ct.clone());
        }
        let e = self.engine;
        let ct = if i % 2 == 0 {
            // T_{2k} = 2 T_k^2 - 1
            let half = self.basis_poly(i / 2)?;
            let sq = e.mult(&half, &half)?;
            let doubled = e.add(&sq, &sq)?;
            e.padd(&doubled, &encode_broadcast(e, -1.0, doubled.level())?)?
        } else {
            // T_{a+b} = 2 T_a T_b - T_{a-b} with a = (i+1)/2, b = (i-1)/2
            let hi = self.basis_poly((i + 1) / 2)?;
            let lo = self.basis_poly((i - 1) / 2)?;
            let prod = e.mult(&hi, &lo)?;
            let doubled = e.add(&prod, &prod)?;
            let t1 = self.basis[&1].clone();
            e.sub(&doubled, &t1)?
        };
        self.basis.insert(i, ct.clone());
        Ok(ct)
    }

    /// Absolute depth (levels below the raw input) of basis polynomial T_i.
    fn basis_depth(i: usize) -> u32 {
        debug_assert!(i >= 1);
        let ceil_log2 = usize::BITS - (i - 1).leading_zeros();
        ceil_log2 + 1
    }

    /// Evaluates `sum coeffs[i] T_i` within `budget` levels below the raw
    /// input. The structure depends on the degree alone, so the consumed
    /// depth is independent of coefficient values.
    fn eval_series(&mut self, coeffs: &[f64], budget: u32) -> Result<Val> {
        let deg = coeffs.len() - 1;
        if deg == 0 {
            return Ok(Val::Const(coeffs[0]));
        }
        let flat_depth = Self::basis_depth(deg) + 1;
        if deg <= self.baby_cap && flat_depth <= budget {
            return self.eval_flat(coeffs);
        }

        // Split at the largest power of two below deg+1:
        //   P = T_g * B + A
        // with B[0] = c_g, B[r] = 2 c_{g+r}, and the reflected tail
        // T_{g-r} folded into A.
        let k = usize::BITS - deg.leading_zeros(); // ceil(log2(deg+1))
        let g = 1usize << (k - 1);
        let mut b_part = Vec::with_capacity(deg - g + 1);
        b_part.push(coeffs[g]);
        for r in 1..=deg - g {
            b_part.push(2.0 * coeffs[g + r]);
        }
        let mut a_part = coeffs[..g].to_vec();
        for r in 1..=deg - g {
            a_part[g - r] -= coeffs[g + r];
        }

        let t_g = self.basis_poly(g)?;
        let b_val = self.eval_series(&b_part, budget - 1)?;
        let product = match b_val {
            Val::Ct(ct) => self.engine.mult(&t_g, &ct)?,
            Val::Const(c) => {
                let pt = encode_broadcast(self.engine, c, t_g.level())?;
                self.engine.pmult(&t_g, &pt)?
            }
        };
        let a_val = self.eval_series(&a_part, budget)?;
        Ok(Val::Ct(match a_val {
            Val::Ct(ct) => self.engine.add(&product, &ct)?,
            Val::Const(c) => {
                let pt = encode_broadcast(self.engine, c, product.level())?;
                self.engine.padd(&product, &pt)?
            }
        }))
    }

    /// One plaintext multiplication per basis polynomial; every structural
    /// term participates so the depth does not depend on coefficient values.
    fn eval_flat(&mut self, coeffs: &[f64]) -> Result<Val> {
        let e = self.engine;
        let deg = coeffs.len() - 1;
        let mut acc: Option<Ciphertext> = None;
        for i in (1..=deg).rev() {
            let t_i = self.basis_poly(i)?;
            let pt = encode_broadcast(e, coeffs[i], t_i.level())?;
            let term = e.pmult(&t_i, &pt)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => e.add(&prev, &term)?,
            });
        }
        let acc = acc.expect("deg >= 1");
        let pt = encode_broadcast(e, coeffs[0], acc.level())?;
        Ok(Val::Ct(e.padd(&acc, &pt)?))
    }
}

/// Evaluates the fitted series on a ciphertext, including the affine map of
/// [a, b] onto [-1, 1]; consumes exactly `approx.depth` levels. Slot values
/// outside [a, b] degrade accuracy, not safety; domain coverage is the
/// caller's obligation.
pub fn ps_eval(engine: &Engine, ct: &Ciphertext, approx: &ChebyshevApprox) -> Result<Ciphertext> {
    if ct.level() < approx.depth {
        return Err(Error::DepthExceeded {
            context: format!("ps_eval(degree {})", approx.degree),
            required: approx.depth as u32,
            available: ct.level() as u32,
        });
    }
    let start = metrics::now();
    let before = engine.counters().snapshot();
    let entry = (ct.level(), ct.consumed());

    let alpha = 2.0 / (approx.b - approx.a);
    let beta = -(approx.a + approx.b) / (approx.b - approx.a);
    let scaled = engine.pmult(ct, &encode_broadcast(engine, alpha, ct.level())?)?;
    let t1 = engine.padd(&scaled, &encode_broadcast(engine, beta, scaled.level())?)?;

    let k = usize::BITS - approx.degree.leading_zeros();
    let mut eval = PsEvaluator {
        engine,
        basis: HashMap::from([(1usize, t1)]),
        baby_cap: (1usize << k.div_ceil(2)) - 1,
    };
    let mut coeffs = approx.coeffs.clone();
    coeffs[0] *= 0.5;
    let out = match eval.eval_series(&coeffs, k + 1)? {
        Val::Ct(ct) => ct,
        Val::Const(_) => unreachable!("degree >= 1"),
    };
    debug_assert_eq!(out.consumed(), entry.1 + approx.depth as u32);
    debug_assert_eq!(out.level(), entry.0 - approx.depth);

    engine.tracker().record(StageRecord {
        label: "ps_eval".into(),
        levels: out.consumed() - entry.1,
        entry_level: entry.0,
        exit_level: out.level(),
        counters: CounterSnapshot::diff(&before, &engine.counters().snapshot()),
        wall_ms: metrics::wall_ms(start),
        note: Some(format!("degree {}", approx.degree)),
    });
    Ok(out)
}

// ── scalar protocols ──────────────────────────────────────────────────────

pub fn fit_sigmoid(bias: f64, domain: (f64, f64), degree: usize) -> Result<ChebyshevApprox> {
    cheb_fit(
        move |x| 1.0 / (1.0 + (-(x + bias)).exp()),
        domain.0,
        domain.1,
        degree,
    )
}

pub fn fit_silu(domain: (f64, f64), degree: usize) -> Result<ChebyshevApprox> {
    cheb_fit(|x| x / (1.0 + (-x).exp()), domain.0, domain.1, degree)
}

pub fn fit_sqrt(domain: (f64, f64), degree: usize) -> Result<ChebyshevApprox> {
    if domain.0 <= 0.0 {
        return Err(Error::Approx(format!(
            "sqrt domain must exclude the singularity: lo = {} <= 0",
            domain.0
        )));
    }
    cheb_fit(|x| x.sqrt(), domain.0, domain.1, degree)
}

pub fn fit_inverse(domain: (f64, f64), degree: usize) -> Result<ChebyshevApprox> {
    if domain.0 <= 0.0 {
        return Err(Error::Approx(format!(
            "inverse domain must exclude the singularity: lo = {} <= 0",
            domain.0
        )));
    }
    cheb_fit(|x| 1.0 / x, domain.0, domain.1, degree)
}

/// Slotwise `sigmoid(x + bias)`; the bias is folded into the fitted
/// function, so it costs no extra level.
pub fn sigmoid_ct(
    engine: &Engine,
    ct: &Ciphertext,
    bias: f64,
    domain: (f64, f64),
    degree: usize,
) -> Result<Ciphertext> {
    ps_eval(engine, ct, &fit_sigmoid(bias, domain, degree)?)
}

/// Slotwise `x * sigmoid(x)`; one level on top of the sigmoid depth.
pub fn silu_ct(
    engine: &Engine,
    ct: &Ciphertext,
    domain: (f64, f64),
    degree: usize,
) -> Result<Ciphertext> {
    let sig = sigmoid_ct(engine, ct, 0.0, domain, degree)?;
    engine.mult(ct, &sig)
}

pub fn sqrt_ct(
    engine: &Engine,
    ct: &Ciphertext,
    domain: (f64, f64),
    degree: usize,
) -> Result<Ciphertext> {
    ps_eval(engine, ct, &fit_sqrt(domain, degree)?)
}

pub fn inverse_ct(
    engine: &Engine,
    ct: &Ciphertext,
    domain: (f64, f64),
    degree: usize,
) -> Result<Ciphertext> {
    ps_eval(engine, ct, &fit_inverse(domain, degree)?)
}
