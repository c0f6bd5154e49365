//! Binary file formats, all little-endian and bit-exact on round trip.
//!
//! * `ENSC` — ciphertext: magic, version u8, ring degree u32, level u16,
//!   scale exponent i16, payload length u64, payload (backend-opaque).
//! * `ENSM` — packed matrix: magic, rows u32, cols u32, then one `ENSC`
//!   record per column.
//! * `ENSW` — weights: magic, version u8, tensor count u32; per tensor a
//!   length-prefixed name, dims (rank u8, u32 sizes), a dtype tag
//!   (0 ternary i8, 1 real f32) and the raw payload. Ternary payload bytes
//!   must be 0x00, 0x01 or 0xFF.
//! * `ENSK` — key material for one backend, with or without the secret.

use crate::blocks::LayerWeights;
use crate::ckks::{CkksCiphertext, CkksKeySet, CkksPublicKey, CkksSecretKey, KskKey, RnsPoly};
use crate::clear::ClearBody;
use crate::engine::{Ciphertext, CtBody};
use crate::error::{Error, Result};
use crate::keys::KeyMaterial;
use crate::packing::{PackedMatrix, TernaryMatrix};
use crate::params::{BackendKind, HeParams};

pub const CIPHERTEXT_MAGIC: &[u8; 4] = b"ENSC";
pub const MATRIX_MAGIC: &[u8; 4] = b"ENSM";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"ENSW";
pub const KEY_MAGIC: &[u8; 4] = b"ENSK";
pub const FORMAT_VERSION: u8 = 1;

// ── primitive writer/reader ───────────────────────────────────────────────

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i16(&mut self, v: i16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.offset(),
                what: format!(
                    "truncated: need {n} byte(s) for {what}, have {}",
                    self.remaining()
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let offset = self.offset();
        let got = self.take(4, "magic")?;
        if got != m {
            return Err(Error::Format {
                offset,
                what: format!("bad magic {:?}, expected {:?}", got, m),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn i16(&mut self, what: &str) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    pub fn version(&mut self) -> Result<u8> {
        let offset = self.offset();
        let v = self.u8("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::Format {
                offset,
                what: format!("unsupported format version {v}"),
            });
        }
        Ok(v)
    }

    pub fn done(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format {
                offset: self.offset(),
                what: format!("{} trailing byte(s)", self.remaining()),
            });
        }
        Ok(())
    }
}

// ── polynomials ───────────────────────────────────────────────────────────

fn write_poly(w: &mut ByteWriter, p: &RnsPoly) {
    w.u16(p.limbs.len() as u16);
    for limb in &p.limbs {
        for &v in limb {
            w.u64(v);
        }
    }
}

fn read_poly(r: &mut ByteReader, n_prime: usize) -> Result<RnsPoly> {
    let limb_count = r.u16("limb count")? as usize;
    let mut limbs = Vec::with_capacity(limb_count);
    for _ in 0..limb_count {
        let raw = r.bytes(n_prime * 8, "poly limb")?;
        limbs.push(
            raw.chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok(RnsPoly { limbs })
}

// ── ciphertexts ───────────────────────────────────────────────────────────

pub fn write_ciphertext(ct: &Ciphertext) -> Vec<u8> {
    let mut payload = ByteWriter::new();
    payload.u64(ct.key_id);
    payload.f64(ct.drift);
    payload.f64(ct.noise);
    payload.u32(ct.consumed);
    match &ct.body {
        CtBody::Clear(b) => {
            payload.u8(0);
            payload.u32(b.slots.len() as u32);
            for &v in &b.slots {
                payload.f64(v);
            }
        }
        CtBody::Ckks(c) => {
            payload.u8(1);
            write_poly(&mut payload, &c.c0);
            write_poly(&mut payload, &c.c1);
        }
    }
    let payload = payload.into_bytes();

    let mut w = ByteWriter::new();
    w.magic(CIPHERTEXT_MAGIC);
    w.u8(FORMAT_VERSION);
    let ring_degree = match &ct.body {
        CtBody::Clear(b) => (b.slots.len() * 2) as u32,
        CtBody::Ckks(c) => c.c0.limbs[0].len() as u32,
    };
    w.u32(ring_degree);
    w.u16(ct.level);
    w.i16(ct.scale_bits);
    w.u64(payload.len() as u64);
    w.bytes(&payload);
    w.into_bytes()
}

pub fn read_ciphertext(bytes: &[u8]) -> Result<Ciphertext> {
    let mut r = ByteReader::new(bytes);
    let ct = read_ciphertext_from(&mut r)?;
    r.done()?;
    Ok(ct)
}

pub fn read_ciphertext_from(r: &mut ByteReader) -> Result<Ciphertext> {
    r.magic(CIPHERTEXT_MAGIC)?;
    r.version()?;
    let ring_degree = r.u32("ring degree")? as usize;
    let level = r.u16("level")?;
    let scale_bits = r.i16("scale exponent")?;
    let payload_len = r.u64("payload length")? as usize;
    let payload_start = r.offset() as usize;
    let payload = r.bytes(payload_len, "payload")?;

    let mut p = ByteReader::new(payload);
    let key_id = p.u64("key id")?;
    let drift = p.f64("scale drift")?;
    let noise = p.f64("noise estimate")?;
    let consumed = p.u32("consumed levels")?;
    let backend = p.u8("backend tag")?;
    let body = match backend {
        0 => {
            let n = p.u32("slot count")? as usize;
            if n != ring_degree / 2 {
                return Err(Error::Format {
                    offset: payload_start as u64 + p.offset() - 4,
                    what: format!("slot count {n} does not match ring degree {ring_degree}"),
                });
            }
            let mut slots = Vec::with_capacity(n);
            for _ in 0..n {
                slots.push(p.f64("slot value")?);
            }
            CtBody::Clear(ClearBody { slots })
        }
        1 => {
            let c0 = read_poly(&mut p, ring_degree)?;
            let c1 = read_poly(&mut p, ring_degree)?;
            if c0.limbs.len() != level as usize + 1 || c1.limbs.len() != c0.limbs.len() {
                return Err(Error::Format {
                    offset: payload_start as u64,
                    what: format!("limb count {} does not match level {level}", c0.limbs.len()),
                });
            }
            CtBody::Ckks(CkksCiphertext { c0, c1 })
        }
        other => {
            return Err(Error::Format {
                offset: payload_start as u64 + p.offset() - 1,
                what: format!("unknown backend tag {other}"),
            })
        }
    };
    p.done()?;
    Ok(Ciphertext {
        body,
        level,
        scale_bits,
        drift,
        slot_count: (ring_degree / 2) as u32,
        key_id,
        consumed,
        noise,
        counter_tag: None,
    })
}

// ── packed matrices ───────────────────────────────────────────────────────

pub fn write_packed_matrix(pm: &PackedMatrix) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(MATRIX_MAGIC);
    w.u32(pm.nrows() as u32);
    w.u32(pm.ncols() as u32);
    for col in &pm.cols {
        w.bytes(&write_ciphertext(col));
    }
    w.into_bytes()
}

pub fn read_packed_matrix(bytes: &[u8]) -> Result<PackedMatrix> {
    let mut r = ByteReader::new(bytes);
    let pm = read_packed_matrix_from(&mut r)?;
    r.done()?;
    Ok(pm)
}

pub fn read_packed_matrix_from(r: &mut ByteReader) -> Result<PackedMatrix> {
    r.magic(MATRIX_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let mut out = Vec::with_capacity(cols);
    for _ in 0..cols {
        out.push(read_ciphertext_from(r)?);
    }
    Ok(PackedMatrix { cols: out, rows })
}

// ── weight files ──────────────────────────────────────────────────────────

enum TensorPayload {
    Ternary(Vec<i8>),
    Real(Vec<f32>),
}

struct Tensor {
    name: String,
    dims: Vec<u32>,
    payload: TensorPayload,
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.u16(t.name.len() as u16);
    w.bytes(t.name.as_bytes());
    w.u8(t.dims.len() as u8);
    for &d in &t.dims {
        w.u32(d);
    }
    match &t.payload {
        TensorPayload::Ternary(v) => {
            w.u8(0);
            w.bytes(&v.iter().map(|&x| x as u8).collect::<Vec<u8>>());
        }
        TensorPayload::Real(v) => {
            w.u8(1);
            for &x in v {
                w.bytes(&x.to_le_bytes());
            }
        }
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let name_len = r.u16("tensor name length")? as usize;
    let name_off = r.offset();
    let name = std::str::from_utf8(r.bytes(name_len, "tensor name")?)
        .map_err(|_| Error::Format {
            offset: name_off,
            what: "tensor name is not UTF-8".into(),
        })?
        .to_string();
    let rank = r.u8("tensor rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32("tensor dim")?);
    }
    let count: usize = dims.iter().map(|&d| d as usize).product();
    let dtype = r.u8("dtype tag")?;
    let payload = match dtype {
        0 => {
            let start = r.offset();
            let raw = r.bytes(count, "ternary payload")?;
            let mut vals = Vec::with_capacity(count);
            for (i, &b) in raw.iter().enumerate() {
                match b {
                    0x00 => vals.push(0i8),
                    0x01 => vals.push(1i8),
                    0xFF => vals.push(-1i8),
                    other => {
                        return Err(Error::Format {
                            offset: start + i as u64,
                            what: format!("ternary tensor `{name}` has invalid byte {other:#04x}"),
                        })
                    }
                }
            }
            TensorPayload::Ternary(vals)
        }
        1 => {
            let raw = r.bytes(count * 4, "real payload")?;
            TensorPayload::Real(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => {
            return Err(Error::Format {
                offset: r.offset() - 1,
                what: format!("unknown dtype tag {other}"),
            })
        }
    };
    Ok(Tensor {
        name,
        dims,
        payload,
    })
}

pub fn write_weights(w: &LayerWeights) -> Vec<u8> {
    let ternary = |name: &str, m: &TernaryMatrix| Tensor {
        name: name.into(),
        dims: vec![m.rows as u32, m.cols as u32],
        payload: TensorPayload::Ternary(m.entries().to_vec()),
    };
    let real = |name: &str, v: &[f64]| Tensor {
        name: name.into(),
        dims: vec![v.len() as u32],
        payload: TensorPayload::Real(v.iter().map(|&x| x as f32).collect()),
    };
    let tensors = vec![
        ternary("wq", &w.wq),
        ternary("wk", &w.wk),
        ternary("wv", &w.wv),
        ternary("wo", &w.wo),
        ternary("w1", &w.w1),
        ternary("w2", &w.w2),
        ternary("w3", &w.w3),
        real("gamma_attn", &w.gamma_attn),
        real("gamma_ffn", &w.gamma_ffn),
        real("gamma_final", &w.gamma_final),
        real("rope_base", &[w.rope_base]),
    ];
    let mut out = ByteWriter::new();
    out.magic(WEIGHTS_MAGIC);
    out.u8(FORMAT_VERSION);
    out.u32(tensors.len() as u32);
    for t in &tensors {
        write_tensor(&mut out, t);
    }
    out.into_bytes()
}

pub fn read_weights(bytes: &[u8]) -> Result<LayerWeights> {
    let mut r = ByteReader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    r.version()?;
    let count = r.u32("tensor count")?;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let t = read_tensor(&mut r)?;
        tensors.insert(t.name.clone(), t);
    }
    r.done()?;

    let ternary = |name: &str| -> Result<TernaryMatrix> {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Protocol(format!("weight file is missing tensor `{name}`")))?;
        match &t.payload {
            TensorPayload::Ternary(v) => {
                if t.dims.len() != 2 {
                    return Err(Error::Protocol(format!("tensor `{name}` must be rank 2")));
                }
                TernaryMatrix::new(t.dims[0] as usize, t.dims[1] as usize, v.clone())
            }
            _ => Err(Error::Protocol(format!("tensor `{name}` must be ternary"))),
        }
    };
    let real = |name: &str| -> Result<Vec<f64>> {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Protocol(format!("weight file is missing tensor `{name}`")))?;
        match &t.payload {
            TensorPayload::Real(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(Error::Protocol(format!("tensor `{name}` must be real"))),
        }
    };

    let weights = LayerWeights {
        wq: ternary("wq")?,
        wk: ternary("wk")?,
        wv: ternary("wv")?,
        wo: ternary("wo")?,
        w1: ternary("w1")?,
        w2: ternary("w2")?,
        w3: ternary("w3")?,
        gamma_attn: real("gamma_attn")?,
        gamma_ffn: real("gamma_ffn")?,
        gamma_final: real("gamma_final")?,
        rope_base: real("rope_base")?
            .first()
            .copied()
            .ok_or_else(|| Error::Protocol("rope_base tensor is empty".into()))?,
    };
    weights.validate()?;
    Ok(weights)
}

// ── key files ─────────────────────────────────────────────────────────────

fn write_ksk(w: &mut ByteWriter, k: &KskKey) {
    write_poly(w, &k.b);
    write_poly(w, &k.a);
}

fn read_ksk(r: &mut ByteReader, n: usize) -> Result<KskKey> {
    Ok(KskKey {
        b: read_poly(r, n)?,
        a: read_poly(r, n)?,
    })
}

/// Serializes key material. With `include_secret` false this is the
/// evaluation-side file: public and evaluation keys plus the refresh oracle
/// if one was embedded, but no decryption key.
pub fn write_key_material(km: &KeyMaterial, include_secret: bool) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(KEY_MAGIC);
    w.u8(FORMAT_VERSION);
    let params_json = serde_json::to_vec(&km.params).expect("params serialize");
    w.u32(params_json.len() as u32);
    w.bytes(&params_json);
    w.u8(match km.backend {
        BackendKind::Clear => 0,
        BackendKind::Ckks => 1,
    });
    w.u64(km.key_id);
    let secret = km.secret.as_ref().filter(|_| include_secret);
    w.u8(secret.is_some() as u8);
    if let Some(sk) = secret {
        write_poly(&mut w, &sk.s);
    }
    w.u8(km.eval.is_some() as u8);
    if let Some(eval) = &km.eval {
        write_poly(&mut w, &eval.public.b);
        write_poly(&mut w, &eval.public.a);
        write_ksk(&mut w, &eval.relin);
        w.u32(eval.rot.len() as u32);
        for (&step, ksk) in &eval.rot {
            w.i64(step);
            write_ksk(&mut w, ksk);
        }
    }
    w.u8(km.refresh_secret.is_some() as u8);
    if let Some(rk) = &km.refresh_secret {
        write_poly(&mut w, &rk.s);
    }
    w.into_bytes()
}

pub fn read_key_material(bytes: &[u8]) -> Result<KeyMaterial> {
    let mut r = ByteReader::new(bytes);
    r.magic(KEY_MAGIC)?;
    r.version()?;
    let params_len = r.u32("params length")? as usize;
    let params_off = r.offset();
    let params: HeParams =
        serde_json::from_slice(r.bytes(params_len, "params json")?).map_err(|e| Error::Format {
            offset: params_off,
            what: format!("bad params json: {e}"),
        })?;
    let n = params.ring_degree;
    let backend = match r.u8("backend tag")? {
        0 => BackendKind::Clear,
        1 => BackendKind::Ckks,
        other => {
            return Err(Error::Format {
                offset: r.offset() - 1,
                what: format!("unknown backend tag {other}"),
            })
        }
    };
    let key_id = r.u64("key id")?;
    let secret = if r.u8("secret flag")? == 1 {
        Some(CkksSecretKey {
            s: read_poly(&mut r, n)?,
        })
    } else {
        None
    };
    let eval = if r.u8("eval flag")? == 1 {
        let public = CkksPublicKey {
            b: read_poly(&mut r, n)?,
            a: read_poly(&mut r, n)?,
        };
        let relin = read_ksk(&mut r, n)?;
        let count = r.u32("rotation key count")?;
        let mut rot = std::collections::BTreeMap::new();
        for _ in 0..count {
            let step = r.i64("rotation step")?;
            rot.insert(step, read_ksk(&mut r, n)?);
        }
        Some(CkksKeySet { public, relin, rot })
    } else {
        None
    };
    let refresh_secret = if r.u8("refresh flag")? == 1 {
        Some(CkksSecretKey {
            s: read_poly(&mut r, n)?,
        })
    } else {
        None
    };
    r.done()?;
    Ok(KeyMaterial {
        params,
        backend,
        key_id,
        secret,
        eval,
        refresh_secret,
    })
}
