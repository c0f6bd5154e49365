//! The homomorphic evaluator: one API over two interchangeable backends.
//!
//! Both backends share slot semantics, level accounting and operation
//! counting. Levels never increase except through `refresh`; every `mult`
//! and `pmult` consumes exactly one level after its rescale. Binary
//! operations first bring both operands to the lower of the two levels.
//!
//! Scale policy (CKKS): declared ciphertext scales are exact powers of two.
//! A ciphertext-ciphertext product rescales by a prime that is close to, but
//! not exactly, the scale; the residual factor is tracked per ciphertext as
//! `drift` and corrected at decode. Plaintext multiplications encode the
//! plaintext at exactly the prime about to be dropped, so they preserve the
//! scale and leave drift untouched.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::ckks::{CkksCiphertext, CkksContext, RnsPoly};
use crate::clear::ClearBody;
use crate::error::{Error, Result};
use crate::keys::KeyMaterial;
use crate::metrics::{LevelTracker, Op, OpCounters};
use crate::params::{BackendKind, HeParams};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum CtBody {
    Clear(ClearBody),
    Ckks(CkksCiphertext),
}

/// Slot vector under encryption, with level, scale and counting metadata.
#[derive(Debug, Clone)]
pub struct Ciphertext {
    pub(crate) body: CtBody,
    pub(crate) level: u16,
    pub(crate) scale_bits: i16,
    /// Residual multiplicative factor on the declared scale; 1.0 when fresh.
    pub(crate) drift: f64,
    pub(crate) slot_count: u32,
    pub(crate) key_id: u64,
    pub(crate) consumed: u32,
    pub(crate) noise: f64,
    /// Optional label for metrics attribution.
    pub counter_tag: Option<String>,
}

impl Ciphertext {
    pub fn level(&self) -> u16 {
        self.level
    }

    pub fn scale_bits(&self) -> i16 {
        self.scale_bits
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count as usize
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    /// Levels consumed on the deepest multiply path that produced this value.
    pub fn consumed(&self) -> u32 {
        self.consumed
    }

    /// Scalar noise estimate, for diagnostics only.
    pub fn noise_estimate(&self) -> f64 {
        self.noise
    }

    pub fn tagged(mut self, tag: &str) -> Self {
        self.counter_tag = Some(tag.to_string());
        self
    }

    fn context_name(&self) -> String {
        self.counter_tag
            .clone()
            .unwrap_or_else(|| "untagged".into())
    }
}

/// Length-N slot vector with level and scale metadata; the unencrypted
/// operand of `padd`/`pmult`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plaintext {
    pub slots: Vec<f64>,
    pub level: u16,
    pub scale_bits: i16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshPolicy {
    /// Refresh allowed anywhere.
    Allowed,
    /// Refresh allowed only inside a scoped region (RMSNorm opens one).
    ScopedOnly,
    /// Refresh always fails; proves a pipeline fits its level budget.
    Strict,
}

/// Guard that marks a refresh-permitted region under `ScopedOnly`.
pub struct RefreshScope<'a> {
    engine: &'a Engine,
}

impl Drop for RefreshScope<'_> {
    fn drop(&mut self) {
        self.engine.refresh_scope.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Guard restoring the previous counter tag.
pub struct TagScope<'a> {
    engine: &'a Engine,
    previous: Option<Arc<str>>,
}

impl Drop for TagScope<'_> {
    fn drop(&mut self) {
        *self.engine.active_tag.lock().unwrap() = self.previous.take();
    }
}

pub struct Engine {
    params: HeParams,
    backend: BackendKind,
    keys: Arc<KeyMaterial>,
    ctx: Option<Arc<CkksContext>>,
    counters: Arc<OpCounters>,
    tracker: Arc<LevelTracker>,
    refresh_policy: Mutex<RefreshPolicy>,
    refresh_scope: AtomicU32,
    active_tag: Mutex<Option<Arc<str>>>,
    enc_rng: Mutex<ChaCha20Rng>,
    pt_cache: Mutex<HashMap<(u64, u16), Arc<RnsPoly>>>,
}

impl Engine {
    pub fn new(keys: Arc<KeyMaterial>) -> Result<Engine> {
        keys.params.validate()?;
        let ctx = match keys.backend {
            BackendKind::Clear => None,
            BackendKind::Ckks => {
                if keys.eval.is_none() {
                    return Err(Error::Protocol(
                        "key material is missing the evaluation keys".into(),
                    ));
                }
                Some(Arc::new(CkksContext::new(&keys.params)?))
            }
        };
        Ok(Engine {
            params: keys.params.clone(),
            backend: keys.backend,
            ctx,
            counters: Arc::new(OpCounters::new()),
            tracker: Arc::new(LevelTracker::new()),
            refresh_policy: Mutex::new(RefreshPolicy::Allowed),
            refresh_scope: AtomicU32::new(0),
            active_tag: Mutex::new(None),
            enc_rng: Mutex::new(ChaCha20Rng::seed_from_u64(keys.params.seed ^ 0x00c0_ffee)),
            pt_cache: Mutex::new(HashMap::new()),
            keys,
        })
    }

    pub fn params(&self) -> &HeParams {
        &self.params
    }

    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn key_id(&self) -> u64 {
        self.keys.key_id
    }

    pub fn keys(&self) -> &KeyMaterial {
        &self.keys
    }

    pub fn slot_count(&self) -> usize {
        self.params.slot_count()
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn tracker(&self) -> &LevelTracker {
        &self.tracker
    }

    pub fn set_refresh_policy(&self, policy: RefreshPolicy) {
        *self.refresh_policy.lock().unwrap() = policy;
    }

    pub fn refresh_policy(&self) -> RefreshPolicy {
        *self.refresh_policy.lock().unwrap()
    }

    pub fn refresh_scope(&self) -> RefreshScope<'_> {
        self.refresh_scope.fetch_add(1, Ordering::SeqCst);
        RefreshScope { engine: self }
    }

    /// Attributes subsequent counter increments to `tag` until the guard
    /// drops.
    pub fn tag_scope(&self, tag: &str) -> TagScope<'_> {
        let mut active = self.active_tag.lock().unwrap();
        let previous = active.take();
        *active = Some(Arc::from(tag));
        TagScope {
            engine: self,
            previous,
        }
    }

    fn bump(&self, op: Op) {
        self.bump_by(op, 1)
    }

    fn bump_by(&self, op: Op, n: u64) {
        let tag = self.active_tag.lock().unwrap().clone();
        self.counters.bump_by(op, n, tag.as_deref());
    }

    // ── encode / encrypt / decrypt ────────────────────────────────────────

    /// Packs `v` into slots (zero-padded) at the given level and scale.
    pub fn encode(&self, v: &[f64], level: u16, scale_bits: i16) -> Result<Plaintext> {
        let n = self.slot_count();
        if v.len() > n {
            return Err(Error::SlotOverflow {
                len: v.len(),
                slots: n,
            });
        }
        if level > self.params.max_level {
            return Err(Error::InvalidParams(format!(
                "encode level {level} exceeds max level {}",
                self.params.max_level
            )));
        }
        self.bump(Op::Encode);
        let mut slots = v.to_vec();
        slots.resize(n, 0.0);
        Ok(Plaintext {
            slots,
            level,
            scale_bits,
        })
    }

    pub fn encode_default(&self, v: &[f64]) -> Result<Plaintext> {
        self.encode(v, self.params.max_level, self.params.scale_bits)
    }

    /// Plaintext slot values as encoded (identity on the clear backend).
    pub fn decode(&self, pt: &Plaintext) -> Vec<f64> {
        pt.slots.clone()
    }

    pub fn encrypt(&self, pt: &Plaintext) -> Result<Ciphertext> {
        if pt.level > self.params.max_level {
            return Err(Error::InvalidParams(format!(
                "plaintext level {} exceeds max level {}",
                pt.level, self.params.max_level
            )));
        }
        self.bump(Op::Encrypt);
        let body = match self.backend {
            BackendKind::Clear => CtBody::Clear(ClearBody {
                slots: pt.slots.clone(),
            }),
            BackendKind::Ckks => {
                let ctx = self.ctx.as_ref().unwrap();
                let eval = self.keys.eval.as_ref().expect("ckks keys present");
                let coeffs = ctx.embed.encode_real(&pt.slots);
                let ints = CkksContext::round_coeffs(&coeffs, (pt.scale_bits as f64).exp2())?;
                let msg = ctx.poly_from_int_coeffs(&ints, pt.level as usize);
                let mut rng = self.enc_rng.lock().unwrap();
                CtBody::Ckks(ctx.encrypt(&eval.public, &msg, &mut rng, self.params.error_std))
            }
        };
        Ok(Ciphertext {
            body,
            level: pt.level,
            scale_bits: pt.scale_bits,
            drift: 1.0,
            slot_count: self.slot_count() as u32,
            key_id: self.keys.key_id,
            consumed: 0,
            noise: self.fresh_noise(),
            counter_tag: None,
        })
    }

    pub fn decrypt(&self, ct: &Ciphertext) -> Result<Vec<f64>> {
        if ct.key_id != self.keys.key_id {
            return Err(Error::KeyMismatch {
                expected: self.keys.key_id,
                found: ct.key_id,
            });
        }
        match (&ct.body, self.backend) {
            (CtBody::Clear(b), BackendKind::Clear) => Ok(b.slots.clone()),
            (CtBody::Ckks(c), BackendKind::Ckks) => {
                let sk = self.keys.secret.as_ref().ok_or(Error::MissingSecretKey)?;
                let ctx = self.ctx.as_ref().unwrap();
                let coeffs = ctx.decrypt(sk, c);
                let scale = (ct.scale_bits as f64).exp2() * ct.drift;
                let scaled: Vec<f64> = coeffs.iter().map(|c| c / scale).collect();
                Ok(ctx.embed.decode_real(&scaled, ctx.slots))
            }
            _ => Err(Error::Protocol(
                "ciphertext backend does not match engine backend".into(),
            )),
        }
    }

    /// Transparent zero ciphertext at `level`.
    pub fn zero_at(&self, level: u16) -> Ciphertext {
        let body = match self.backend {
            BackendKind::Clear => CtBody::Clear(ClearBody::zero(self.slot_count())),
            BackendKind::Ckks => {
                let ctx = self.ctx.as_ref().unwrap();
                CtBody::Ckks(CkksCiphertext {
                    c0: ctx.poly_zero(level as usize),
                    c1: ctx.poly_zero(level as usize),
                })
            }
        };
        Ciphertext {
            body,
            level,
            scale_bits: self.params.scale_bits,
            drift: 1.0,
            slot_count: self.slot_count() as u32,
            key_id: self.keys.key_id,
            consumed: 0,
            noise: 0.0,
            counter_tag: None,
        }
    }

    fn fresh_noise(&self) -> f64 {
        let n = self.params.ring_degree as f64;
        (0.5 + self.params.error_std) * n.sqrt() / self.params.scale()
    }

    // ── level alignment ───────────────────────────────────────────────────

    fn check_slots(&self, a: &Ciphertext, b: &Ciphertext) -> Result<()> {
        if a.slot_count != b.slot_count {
            return Err(Error::SlotCountMismatch(
                a.slot_count as usize,
                b.slot_count as usize,
            ));
        }
        if a.scale_bits != b.scale_bits {
            return Err(Error::Protocol(format!(
                "operands carry different scales 2^{} and 2^{}",
                a.scale_bits, b.scale_bits
            )));
        }
        Ok(())
    }

    fn at_level(&self, ct: &Ciphertext, level: u16) -> Ciphertext {
        debug_assert!(level <= ct.level);
        if level == ct.level {
            return ct.clone();
        }
        let body = match &ct.body {
            CtBody::Clear(b) => CtBody::Clear(b.clone()),
            CtBody::Ckks(c) => {
                CtBody::Ckks(self.ctx.as_ref().unwrap().ct_mod_switch(c, level as usize))
            }
        };
        Ciphertext {
            body,
            level,
            ..ct.clone()
        }
    }

    fn aligned(&self, a: &Ciphertext, b: &Ciphertext) -> (Ciphertext, Ciphertext) {
        let level = a.level.min(b.level);
        (self.at_level(a, level), self.at_level(b, level))
    }

    // ── additive ops ──────────────────────────────────────────────────────

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.binary_additive(a, b, Op::Add)
    }

    pub fn sub(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.binary_additive(a, b, Op::Sub)
    }

    fn binary_additive(&self, a: &Ciphertext, b: &Ciphertext, op: Op) -> Result<Ciphertext> {
        self.check_slots(a, b)?;
        let (a, b) = self.aligned(a, b);
        debug_assert!(
            (a.drift / b.drift - 1.0).abs() < 1e-4,
            "additive operands have diverged scales: {} vs {}",
            a.drift,
            b.drift
        );
        self.bump(op);
        let body = match (&a.body, &b.body) {
            (CtBody::Clear(x), CtBody::Clear(y)) => {
                CtBody::Clear(if op == Op::Add { x.add(y) } else { x.sub(y) })
            }
            (CtBody::Ckks(x), CtBody::Ckks(y)) => {
                let ctx = self.ctx.as_ref().unwrap();
                CtBody::Ckks(if op == Op::Add {
                    ctx.ct_add(x, y)
                } else {
                    ctx.ct_sub(x, y)
                })
            }
            _ => unreachable!("mixed backends"),
        };
        Ok(Ciphertext {
            body,
            level: a.level,
            scale_bits: a.scale_bits,
            drift: a.drift,
            slot_count: a.slot_count,
            key_id: a.key_id,
            consumed: a.consumed.max(b.consumed),
            noise: a.noise + b.noise,
            counter_tag: a.counter_tag.clone(),
        })
    }

    /// Plaintext addition; consumes no level.
    pub fn padd(&self, a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext> {
        self.bump(Op::Add);
        let body = match &a.body {
            CtBody::Clear(x) => CtBody::Clear(x.add_slots(&pt.slots)),
            CtBody::Ckks(x) => {
                let ctx = self.ctx.as_ref().unwrap();
                // Encode at the ciphertext's exact effective scale so the
                // addition is drift-free.
                let scale = (a.scale_bits as f64).exp2() * a.drift;
                let poly = self.plain_poly(&pt.slots, a.level, scale, false)?;
                CtBody::Ckks(ctx.ct_add_plain(x, &poly))
            }
        };
        Ok(Ciphertext {
            body,
            noise: a.noise + 1e-18,
            ..a.clone()
        })
    }

    // ── multiplicative ops ────────────────────────────────────────────────

    pub fn mult(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check_slots(a, b)?;
        let (a, b) = self.aligned(a, b);
        if a.level < 1 {
            return Err(Error::DepthExceeded {
                context: a.context_name(),
                required: 1,
                available: 0,
            });
        }
        self.bump(Op::Mult);
        let level = a.level - 1;
        let (body, drift) = match (&a.body, &b.body) {
            (CtBody::Clear(x), CtBody::Clear(y)) => (CtBody::Clear(x.mul(y)), a.drift * b.drift),
            (CtBody::Ckks(x), CtBody::Ckks(y)) => {
                let ctx = self.ctx.as_ref().unwrap();
                let eval = self.keys.eval.as_ref().expect("ckks keys present");
                let raw = ctx.ct_mul(x, y, &eval.relin);
                let rescaled = ctx.ct_rescale(&raw);
                let q_top = ctx.chain[a.level as usize] as f64;
                let scale = (a.scale_bits as f64).exp2();
                (CtBody::Ckks(rescaled), a.drift * b.drift * scale / q_top)
            }
            _ => unreachable!("mixed backends"),
        };
        Ok(Ciphertext {
            body,
            level,
            scale_bits: a.scale_bits,
            drift,
            slot_count: a.slot_count,
            key_id: a.key_id,
            consumed: a.consumed.max(b.consumed) + 1,
            noise: a.noise + b.noise + self.fresh_noise(),
            counter_tag: a.counter_tag.clone(),
        })
    }

    /// Plaintext multiplication; rescales, consuming one level, and
    /// preserves the declared scale exactly.
    pub fn pmult(&self, a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext> {
        if a.level < 1 {
            return Err(Error::DepthExceeded {
                context: a.context_name(),
                required: 1,
                available: 0,
            });
        }
        self.bump(Op::PMult);
        let level = a.level - 1;
        // Broadcast constants fold the accumulated drift away (their
        // encoding is O(1), so skipping the cache is free); slot-varying
        // plaintexts encode at exactly the prime being dropped, which the
        // rescale cancels, and stay cacheable.
        let first = pt.slots.first().copied().unwrap_or(0.0);
        let broadcast = pt.slots.iter().all(|&s| s == first);
        let mut drift = a.drift;
        let body = match &a.body {
            CtBody::Clear(x) => {
                drift = 1.0;
                CtBody::Clear(x.mul_slots(&pt.slots))
            }
            CtBody::Ckks(x) => {
                let ctx = self.ctx.as_ref().unwrap();
                let q_top = ctx.chain[a.level as usize] as f64;
                let poly = if broadcast {
                    drift = 1.0;
                    self.plain_poly(&pt.slots, a.level, q_top / a.drift, false)?
                } else {
                    self.plain_poly(&pt.slots, a.level, q_top, true)?
                };
                CtBody::Ckks(ctx.ct_rescale(&ctx.ct_mul_plain(x, &poly)))
            }
        };
        Ok(Ciphertext {
            body,
            level,
            scale_bits: a.scale_bits,
            drift,
            slot_count: a.slot_count,
            key_id: a.key_id,
            consumed: a.consumed + 1,
            noise: a.noise + self.fresh_noise(),
            counter_tag: a.counter_tag.clone(),
        })
    }

    /// Encoded plaintext polynomial at `level`, at an arbitrary real scale.
    /// Cacheable encodings (the prime-scale ones used by pmult) are memoised.
    fn plain_poly(
        &self,
        slots: &[f64],
        level: u16,
        scale: f64,
        cacheable: bool,
    ) -> Result<Arc<RnsPoly>> {
        let ctx = self.ctx.as_ref().unwrap();
        let key = if cacheable {
            let mut bytes = Vec::with_capacity(slots.len() * 8);
            for s in slots {
                bytes.extend_from_slice(&s.to_bits().to_le_bytes());
            }
            Some((crate::keys::fnv1a(&bytes), level))
        } else {
            None
        };
        if let Some(k) = key {
            if let Some(hit) = self.pt_cache.lock().unwrap().get(&k) {
                return Ok(hit.clone());
            }
        }
        // Broadcast constants embed as a constant polynomial.
        let first = slots.first().copied().unwrap_or(0.0);
        let ints = if slots.iter().all(|&s| s == first) && slots.len() == ctx.slots {
            let mut ints = vec![0i64; ctx.n_prime];
            ints[0] = CkksContext::round_coeffs(&[first], scale)?[0];
            ints
        } else {
            let coeffs = ctx.embed.encode_real(slots);
            CkksContext::round_coeffs(&coeffs, scale)?
        };
        let poly = Arc::new(ctx.poly_from_int_coeffs(&ints, level as usize));
        if let Some(k) = key {
            let mut cache = self.pt_cache.lock().unwrap();
            if cache.len() >= 512 {
                cache.clear();
            }
            cache.insert(k, poly.clone());
        }
        Ok(poly)
    }

    // ── rotation ──────────────────────────────────────────────────────────

    /// Cyclic left shift by `k` slots (negative shifts right), composed from
    /// keyed power-of-two steps. The rotation counter advances by the number
    /// of keyed steps actually used.
    pub fn rotate(&self, ct: &Ciphertext, k: i64) -> Result<Ciphertext> {
        let steps = self.decompose_rotation(k);
        if steps.is_empty() {
            return Ok(ct.clone());
        }
        self.bump_by(Op::Rot, steps.len() as u64);
        let body = match &ct.body {
            CtBody::Clear(b) => {
                let total: i64 = steps.iter().sum();
                CtBody::Clear(b.rotate(total))
            }
            CtBody::Ckks(c) => {
                let ctx = self.ctx.as_ref().unwrap();
                let eval = self.keys.eval.as_ref().expect("ckks keys present");
                let mut cur = c.clone();
                for &step in &steps {
                    let ksk = eval.rot.get(&step).ok_or_else(|| {
                        Error::Protocol(format!("missing rotation key for step {step}"))
                    })?;
                    cur = ctx.ct_rotate_step(&cur, step, ksk);
                }
                CtBody::Ckks(cur)
            }
        };
        Ok(Ciphertext {
            body,
            noise: ct.noise + steps.len() as f64 * 1e-18,
            ..ct.clone()
        })
    }

    /// Signed power-of-two steps whose sum is congruent to `k` mod N, using
    /// whichever direction needs fewer keyed steps.
    fn decompose_rotation(&self, k: i64) -> Vec<i64> {
        let n = self.slot_count() as i64;
        let left = k.rem_euclid(n);
        if left == 0 {
            return Vec::new();
        }
        let right = n - left; // rotate right by this amount instead
        let (amount, sign) = if left.count_ones() <= right.count_ones() {
            (left, 1i64)
        } else {
            (right, -1i64)
        };
        let mut steps = Vec::new();
        let mut bit = 1i64;
        let mut rest = amount;
        while rest > 0 {
            if rest & 1 == 1 {
                steps.push(sign * bit);
            }
            rest >>= 1;
            bit <<= 1;
        }
        steps
    }

    // ── refresh ───────────────────────────────────────────────────────────

    /// Simulated bootstrap: resets the level to `L - K`, preserving slot
    /// values. On the CKKS backend this is a decrypt-recrypt through the
    /// trusted refresh oracle embedded in the evaluation keys.
    pub fn refresh(&self, ct: &Ciphertext) -> Result<Ciphertext> {
        match self.refresh_policy() {
            RefreshPolicy::Allowed => {}
            RefreshPolicy::ScopedOnly => {
                if self.refresh_scope.load(Ordering::SeqCst) == 0 {
                    return Err(Error::RefreshDisabled("scoped-only"));
                }
            }
            RefreshPolicy::Strict => return Err(Error::RefreshDisabled("strict")),
        }
        self.bump(Op::Refresh);
        let level = self.params.refreshed_level();
        let body = match &ct.body {
            CtBody::Clear(b) => CtBody::Clear(b.clone()),
            CtBody::Ckks(c) => {
                let ctx = self.ctx.as_ref().unwrap();
                let sk = self
                    .keys
                    .refresh_secret
                    .as_ref()
                    .or(self.keys.secret.as_ref())
                    .ok_or(Error::MissingRefreshKey)?;
                let coeffs = ctx.decrypt(sk, c);
                let scale = (ct.scale_bits as f64).exp2() * ct.drift;
                let scaled: Vec<f64> = coeffs.iter().map(|x| x / scale).collect();
                let slots = ctx.embed.decode_real(&scaled, ctx.slots);
                let re = ctx.embed.encode_real(&slots);
                let ints = CkksContext::round_coeffs(&re, self.params.scale())?;
                CtBody::Ckks(ctx.trivial_encrypt(ctx.poly_from_int_coeffs(&ints, level as usize)))
            }
        };
        Ok(Ciphertext {
            body,
            level,
            scale_bits: self.params.scale_bits,
            drift: 1.0,
            slot_count: ct.slot_count,
            key_id: ct.key_id,
            consumed: ct.consumed,
            noise: self.fresh_noise(),
            counter_tag: ct.counter_tag.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CounterSnapshot;

    pub(crate) fn clear_engine() -> Engine {
        let params = HeParams::small().with_seed(1);
        let keys = KeyMaterial::generate(&params, BackendKind::Clear, true).unwrap();
        Engine::new(Arc::new(keys)).unwrap()
    }

    pub(crate) fn ckks_engine() -> Engine {
        let params = HeParams::new(1 << 7, 6, 2, 40).with_seed(1);
        let keys = KeyMaterial::generate(&params, BackendKind::Ckks, true).unwrap();
        Engine::new(Arc::new(keys)).unwrap()
    }

    fn enc(e: &Engine, v: &[f64]) -> Ciphertext {
        e.encrypt(&e.encode_default(v).unwrap()).unwrap()
    }

    fn both() -> Vec<Engine> {
        vec![clear_engine(), ckks_engine()]
    }

    #[test]
    fn encode_pads_with_zeros() {
        let e = clear_engine();
        let pt = e.encode(&[1.0, 2.0, 3.0], 4, 40).unwrap();
        assert_eq!(pt.slots.len(), e.slot_count());
        assert_eq!(&pt.slots[..4], &[1.0, 2.0, 3.0, 0.0]);
        assert!(pt.slots[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_rejects_oversize() {
        let e = clear_engine();
        let v = vec![0.0; e.slot_count() + 1];
        assert!(matches!(
            e.encode_default(&v),
            Err(Error::SlotOverflow { .. })
        ));
    }

    #[test]
    fn clear_roundtrip_is_exact() {
        let e = clear_engine();
        let v: Vec<f64> = (0..e.slot_count()).map(|i| (i as f64).sin()).collect();
        let ct = enc(&e, &v);
        assert_eq!(e.decrypt(&ct).unwrap(), v);
    }

    #[test]
    fn smallest_legal_ring_roundtrips() {
        // N' = 16, L = 4, K = 2: the minimum configuration keygen accepts.
        let p = HeParams::tiny().with_seed(7);
        let e = Engine::new(Arc::new(
            KeyMaterial::generate(&p, BackendKind::Ckks, true).unwrap(),
        ))
        .unwrap();
        let v = [0.5, -0.25, 1.0];
        let back = e.decrypt(&enc(&e, &v)).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn ckks_roundtrip_within_eps() {
        let e = ckks_engine();
        let v: Vec<f64> = (0..e.slot_count()).map(|i| 0.5 - (i % 2) as f64).collect();
        let ct = enc(&e, &v);
        let back = e.decrypt(&ct).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= e.params().backend_eps, "{a} vs {b}");
        }
    }

    #[test]
    fn evaluate_only_engine_cannot_decrypt() {
        let params = HeParams::new(1 << 7, 6, 2, 40).with_seed(1);
        let full = KeyMaterial::generate(&params, BackendKind::Ckks, true).unwrap();
        let client = Engine::new(Arc::new(full.evaluation_only())).unwrap();
        let ct = enc(&client, &[1.0]);
        assert!(matches!(client.decrypt(&ct), Err(Error::MissingSecretKey)));
        // Evaluation still works, including the refresh oracle.
        assert!(client.mult(&ct, &ct).is_ok());
        assert!(client.refresh(&ct).is_ok());
    }

    #[test]
    fn decrypt_with_wrong_key_is_flagged() {
        let e = ckks_engine();
        let params2 = HeParams::new(1 << 7, 6, 2, 40).with_seed(99);
        let other = Engine::new(Arc::new(
            KeyMaterial::generate(&params2, BackendKind::Ckks, true).unwrap(),
        ))
        .unwrap();
        let ct = enc(&e, &[1.0]);
        assert!(matches!(other.decrypt(&ct), Err(Error::KeyMismatch { .. })));
    }

    #[test]
    fn add_sub_examples() {
        for e in both() {
            let a = enc(&e, &[1.0, 2.0]);
            let b = enc(&e, &[3.0, 4.0]);
            let sum = e.decrypt(&e.add(&a, &b).unwrap()).unwrap();
            assert!((sum[0] - 4.0).abs() < 2.0 * e.params().backend_eps);
            assert!((sum[1] - 6.0).abs() < 2.0 * e.params().backend_eps);

            let zero = e.decrypt(&e.sub(&a, &a).unwrap()).unwrap();
            assert!(zero.iter().all(|&x| x.abs() <= e.params().backend_eps));
        }
    }

    #[test]
    fn add_matches_slotwise_oracle() {
        for e in both() {
            let va: Vec<f64> = (0..e.slot_count())
                .map(|i| ((i * 17 % 13) as f64) / 7.0 - 1.0)
                .collect();
            let vb: Vec<f64> = (0..e.slot_count())
                .map(|i| ((i * 5 % 11) as f64) / 5.0 - 1.0)
                .collect();
            let out = e
                .decrypt(&e.add(&enc(&e, &va), &enc(&e, &vb)).unwrap())
                .unwrap();
            for i in 0..va.len() {
                assert!((out[i] - (va[i] + vb[i])).abs() <= 2.0 * e.params().backend_eps);
            }
        }
    }

    #[test]
    fn mult_examples_and_level() {
        for e in both() {
            let a = enc(&e, &[1.0, 0.0, 2.0]);
            let b = enc(&e, &[5.0, 9.0, 0.5]);
            let prod = e.mult(&a, &b).unwrap();
            assert_eq!(prod.level(), e.params().max_level - 1);
            let out = e.decrypt(&prod).unwrap();
            for (got, want) in out.iter().zip([5.0, 0.0, 1.0]) {
                assert!((got - want).abs() < 1e-4, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn pmult_by_ones_preserves_values_and_drops_level() {
        for e in both() {
            let v = [0.25, -0.75, 1.5];
            let ct = enc(&e, &v);
            let ones = e.encode_default(&vec![1.0; e.slot_count()]).unwrap();
            let out = e.pmult(&ct, &ones).unwrap();
            assert_eq!(out.level(), ct.level() - 1);
            assert_eq!(out.consumed(), ct.consumed() + 1);
            let dec = e.decrypt(&out).unwrap();
            for (got, want) in dec.iter().zip(v) {
                assert!((got - want).abs() <= e.params().backend_eps);
            }
        }
    }

    #[test]
    fn mult_at_level_two_matches_oracle() {
        for e in both() {
            let va: Vec<f64> = (0..8).map(|i| (i as f64) / 4.0 - 1.0).collect();
            let vb: Vec<f64> = (0..8).map(|i| 1.0 - (i as f64) / 8.0).collect();
            // Bring both operands down to level 2 first.
            let mut a = enc(&e, &va);
            let mut b = enc(&e, &vb);
            while a.level() > 2 {
                let ones = e.encode_default(&vec![1.0; e.slot_count()]).unwrap();
                a = e.pmult(&a, &ones).unwrap();
                b = e.pmult(&b, &ones).unwrap();
            }
            let prod = e.mult(&a, &b).unwrap();
            assert_eq!(prod.level(), 1);
            let out = e.decrypt(&prod).unwrap();
            for i in 0..8 {
                assert!((out[i] - va[i] * vb[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn depth_exhaustion_names_the_tag() {
        for e in both() {
            let ct = enc(&e, &[1.0]).tagged("attention.qk");
            let floor = e.at_level(&ct, 0);
            let err = e.mult(&floor, &floor).unwrap_err();
            match err {
                Error::DepthExceeded { context, .. } => assert_eq!(context, "attention.qk"),
                other => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn rotation_examples() {
        for e in both() {
            let mut v = vec![0.0; e.slot_count()];
            v[0] = 1.0;
            v[1] = 2.0;
            v[2] = 3.0;
            v[3] = 4.0;
            let ct = enc(&e, &v);

            let r1 = e.decrypt(&e.rotate(&ct, 1).unwrap()).unwrap();
            assert!((r1[0] - 2.0).abs() < 1e-5);
            assert!((r1[1] - 3.0).abs() < 1e-5);
            assert!((r1[2] - 4.0).abs() < 1e-5);
            let last = r1[e.slot_count() - 1];
            assert!((last - 1.0).abs() < 1e-5, "wraparound slot: {last}");

            let before = e.counters().snapshot();
            let r0 = e.rotate(&ct, 0).unwrap();
            assert_eq!(
                CounterSnapshot::diff(&before, &e.counters().snapshot()).rot,
                0
            );
            let d0 = e.decrypt(&r0).unwrap();
            for (a, b) in d0.iter().zip(&v) {
                assert!((a - b).abs() <= e.params().backend_eps);
            }

            // Inverse composition returns the original.
            for k in [1i64, 3, 5] {
                let back = e
                    .decrypt(&e.rotate(&e.rotate(&ct, k).unwrap(), -k).unwrap())
                    .unwrap();
                for (a, b) in back.iter().zip(&v) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn rotation_counter_counts_keyed_steps() {
        let e = clear_engine();
        let ct = enc(&e, &[1.0]);
        let before = e.counters().snapshot();
        e.rotate(&ct, 5).unwrap(); // 5 = 4 + 1 -> two keyed steps
        let diff = CounterSnapshot::diff(&before, &e.counters().snapshot());
        assert_eq!(diff.rot, 2);
        // N - 1 rotates right once instead of log-many lefts.
        let before = e.counters().snapshot();
        e.rotate(&ct, e.slot_count() as i64 - 1).unwrap();
        let diff = CounterSnapshot::diff(&before, &e.counters().snapshot());
        assert_eq!(diff.rot, 1);
    }

    #[test]
    fn refresh_resets_level_and_preserves_values() {
        for e in both() {
            let v = [0.5, -1.25, 2.0];
            let mut ct = enc(&e, &v);
            let ones = e.encode_default(&vec![1.0; e.slot_count()]).unwrap();
            while ct.level() > 1 {
                ct = e.pmult(&ct, &ones).unwrap();
            }
            let refreshed = e.refresh(&ct).unwrap();
            assert_eq!(refreshed.level(), e.params().refreshed_level());
            let out = e.decrypt(&refreshed).unwrap();
            for (got, want) in out.iter().zip(v) {
                assert!((got - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn refresh_after_exhaustion_enables_mult_again() {
        for e in both() {
            let mut ct = enc(&e, &[0.5, 0.5]);
            let other = enc(&e, &[2.0, 2.0]);
            while ct.level() > 0 {
                ct = e.mult(&ct, &e.at_level(&other, ct.level())).unwrap();
            }
            assert!(e.mult(&ct, &ct).is_err());
            let refreshed = e.refresh(&ct).unwrap();
            let prod = e
                .mult(&refreshed, &e.at_level(&other, refreshed.level()))
                .unwrap();
            let expected = 0.5 * 2.0f64.powi(e.params().max_level as i32 + 1);
            let out = e.decrypt(&prod).unwrap();
            assert!(
                (out[0] - expected).abs() / expected < 1e-4,
                "{} vs {expected}",
                out[0]
            );
        }
    }

    #[test]
    fn refresh_policies() {
        let e = clear_engine();
        let ct = enc(&e, &[1.0]);
        e.set_refresh_policy(RefreshPolicy::Strict);
        assert!(matches!(e.refresh(&ct), Err(Error::RefreshDisabled(_))));
        e.set_refresh_policy(RefreshPolicy::ScopedOnly);
        assert!(e.refresh(&ct).is_err());
        {
            let _scope = e.refresh_scope();
            assert!(e.refresh(&ct).is_ok());
        }
        assert!(e.refresh(&ct).is_err());
        e.set_refresh_policy(RefreshPolicy::Allowed);
        assert!(e.refresh(&ct).is_ok());
    }

    #[test]
    fn consumed_levels_match_mult_count() {
        for e in both() {
            let ct = enc(&e, &[0.9, 0.9]);
            let ones = e.encode_default(&vec![1.0; e.slot_count()]).unwrap();
            let a = e.pmult(&ct, &ones).unwrap();
            let b = e.mult(&a, &a).unwrap();
            let c = e.add(&b, &a).unwrap();
            assert_eq!(c.consumed(), 2);
            assert_eq!(
                e.params().max_level - c.level(),
                2,
                "level ledger equals mult+pmult count"
            );
        }
    }

    #[test]
    fn replay_produces_identical_counters() {
        let run = || {
            let e = clear_engine();
            let a = enc(&e, &[1.0, 2.0]);
            let b = enc(&e, &[3.0, 4.0]);
            let s = e.add(&a, &b).unwrap();
            let p = e.mult(&s, &a).unwrap();
            let _ = e.rotate(&p, 3).unwrap();
            e.counters().snapshot()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mixed_scales_are_rejected() {
        let e = clear_engine();
        let a = enc(&e, &[1.0]);
        let pt = e.encode(&[1.0], e.params().max_level, 30).unwrap();
        let b = e.encrypt(&pt).unwrap();
        assert!(matches!(e.add(&a, &b), Err(Error::Protocol(_))));
        assert!(matches!(e.mult(&a, &b), Err(Error::Protocol(_))));
    }

    #[test]
    fn independent_ops_run_in_parallel() {
        let e = ckks_engine();
        let cts: Vec<Ciphertext> = (0..4).map(|i| enc(&e, &[i as f64, -(i as f64)])).collect();
        let serial: Vec<Vec<f64>> = cts
            .iter()
            .map(|c| e.decrypt(&e.mult(c, c).unwrap()).unwrap())
            .collect();
        let parallel: Vec<Vec<f64>> = std::thread::scope(|s| {
            let handles: Vec<_> = cts
                .iter()
                .map(|c| s.spawn(|| e.decrypt(&e.mult(c, c).unwrap()).unwrap()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(serial, parallel);
    }

    #[test]
    fn tagged_counters_attribute_ops() {
        let e = clear_engine();
        let a = enc(&e, &[1.0]);
        {
            let _t = e.tag_scope("stage.one");
            let _ = e.add(&a, &a).unwrap();
        }
        let snap = e.counters().snapshot();
        assert_eq!(snap.per_tag["stage.one"].add, 1);
    }
}
