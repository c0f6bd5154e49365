//! Key material shared by both backends.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::ckks::{CkksContext, CkksKeySet, CkksSecretKey};
use crate::error::Result;
use crate::params::{BackendKind, HeParams};

/// Secret, public and evaluation keys for one parameter set.
///
/// The clear backend carries no real key data; the CKKS backend holds the
/// ring keys. `refresh_secret` powers the simulated bootstrap (a
/// decrypt-recrypt oracle): it is a copy of the secret key that travels with
/// the evaluation keys when the trusted-refresh flag is set at keygen.
pub struct KeyMaterial {
    pub params: HeParams,
    pub backend: BackendKind,
    /// Opaque identifier for wire reference; identical seeds and parameters
    /// produce identical ids.
    pub key_id: u64,
    pub secret: Option<CkksSecretKey>,
    pub eval: Option<CkksKeySet>,
    pub refresh_secret: Option<CkksSecretKey>,
}

impl KeyMaterial {
    /// Generates key material; deterministic under `params.seed`.
    ///
    /// `trusted_refresh` embeds the refresh oracle alongside the evaluation
    /// keys so an evaluate-only party can still run the simulated bootstrap.
    pub fn generate(
        params: &HeParams,
        backend: BackendKind,
        trusted_refresh: bool,
    ) -> Result<KeyMaterial> {
        params.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(params.seed ^ 0x656e_7368_726f_7564);
        match backend {
            BackendKind::Clear => Ok(KeyMaterial {
                params: params.clone(),
                backend,
                key_id: key_id_from(&[params_digest(params), params.seed]),
                secret: None,
                eval: None,
                refresh_secret: None,
            }),
            BackendKind::Ckks => {
                let ctx = CkksContext::new(params)?;
                let (sk, keys) = ctx.keygen(&mut rng, params.error_std);
                let key_id = key_id_from(
                    &keys
                        .public
                        .b
                        .limbs
                        .iter()
                        .flat_map(|l| l.iter().copied())
                        .collect::<Vec<u64>>(),
                );
                Ok(KeyMaterial {
                    params: params.clone(),
                    backend,
                    key_id,
                    refresh_secret: trusted_refresh.then(|| sk.clone()),
                    secret: Some(sk),
                    eval: Some(keys),
                })
            }
        }
    }

    /// Evaluation-side view: no decryption capability. The refresh oracle is
    /// kept only if it was embedded at keygen.
    pub fn evaluation_only(&self) -> KeyMaterial {
        KeyMaterial {
            params: self.params.clone(),
            backend: self.backend,
            key_id: self.key_id,
            secret: None,
            eval: self.eval.clone(),
            refresh_secret: self.refresh_secret.clone(),
        }
    }

    pub fn can_decrypt(&self) -> bool {
        self.backend == BackendKind::Clear || self.secret.is_some()
    }
}

pub(crate) fn params_digest(params: &HeParams) -> u64 {
    fnv1a(
        format!(
            "{}|{}|{}|{}|{}",
            params.ring_degree,
            params.max_level,
            params.refresh_cost,
            params.scale_bits,
            params.base_bits
        )
        .as_bytes(),
    )
}

fn key_id_from(words: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(words.len() * 8);
    for w in words {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    fnv1a(&bytes)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
