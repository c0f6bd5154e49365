//! Run configuration: parameters, model shape, approximation profiles and
//! kernel selection, loadable from a JSON file.

use serde::{Deserialize, Serialize};

use crate::approx::Profiles;
use crate::blocks::{AttentionConfig, LayerConfig, RopeMode};
use crate::error::{Error, Result};
use crate::keys::fnv1a;
use crate::linalg::ExtractionStrategy;
use crate::params::{BackendKind, HeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub seq_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// -ln(seq_len).
    #[default]
    NegLogSeq,
    /// +ln(seq_len).
    PosLogSeq,
    Custom(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Pcmm,
    Ccmm,
    Rope,
    Attention,
    Rmsnorm,
    Ffn,
    Layer,
}

impl std::str::FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pcmm" => Kernel::Pcmm,
            "ccmm" => Kernel::Ccmm,
            "rope" => Kernel::Rope,
            "attention" => Kernel::Attention,
            "rmsnorm" => Kernel::Rmsnorm,
            "ffn" => Kernel::Ffn,
            "layer" => Kernel::Layer,
            other => return Err(Error::InvalidParams(format!("unknown kernel `{other}`"))),
        })
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Kernel::Pcmm => "pcmm",
            Kernel::Ccmm => "ccmm",
            Kernel::Rope => "rope",
            Kernel::Attention => "attention",
            Kernel::Rmsnorm => "rmsnorm",
            Kernel::Ffn => "ffn",
            Kernel::Layer => "layer",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub params: HeParams,
    pub backend: BackendKind,
    pub model: ModelDims,
    pub profiles: Profiles,
    #[serde(default)]
    pub bias_mode: BiasMode,
    #[serde(default)]
    pub rope_mode: RopeMode,
    #[serde(default)]
    pub extraction: ExtractionStrategy,
    #[serde(default)]
    pub final_norm: bool,
    pub eps: f64,
    pub seed: u64,
}

impl RunConfig {
    /// Small desk-scale default: one layer at s=8, d=16, 2 heads, f=32.
    pub fn desk() -> Self {
        RunConfig {
            params: HeParams::desk(),
            backend: BackendKind::Ckks,
            model: ModelDims {
                seq_len: 8,
                dim: 16,
                heads: 2,
                ffn_dim: 32,
            },
            profiles: Profiles::default().with_norm_domain((0.05, 5.0)),
            bias_mode: BiasMode::NegLogSeq,
            rope_mode: RopeMode::Paired,
            extraction: ExtractionStrategy::Logarithmic,
            final_norm: false,
            eps: 1e-5,
            seed: 7,
        }
    }

    /// Full-layer profile with the depth to run end to end on CKKS.
    pub fn layer_profile() -> Self {
        RunConfig {
            params: HeParams::layer(),
            ..RunConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.model.heads == 0 || self.model.dim % self.model.heads != 0 {
            return Err(Error::InvalidParams(format!(
                "heads {} must divide dim {}",
                self.model.heads, self.model.dim
            )));
        }
        if (self.model.dim / self.model.heads) % 2 != 0 {
            return Err(Error::InvalidParams(
                "head dimension must be even for rotary embeddings".into(),
            ));
        }
        if self.model.seq_len > self.params.slot_count() {
            return Err(Error::InvalidParams(format!(
                "sequence length {} exceeds slot count {}",
                self.model.seq_len,
                self.params.slot_count()
            )));
        }
        Ok(())
    }

    pub fn bias(&self) -> f64 {
        match self.bias_mode {
            BiasMode::NegLogSeq => -(self.model.seq_len as f64).ln(),
            BiasMode::PosLogSeq => (self.model.seq_len as f64).ln(),
            BiasMode::Custom(b) => b,
        }
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        Ok(
            AttentionConfig::new(self.model.seq_len, self.model.dim, self.model.heads)?
                .with_bias(self.bias()),
        )
    }

    pub fn layer_config(&self) -> Result<LayerConfig> {
        Ok(LayerConfig {
            attention: self.attention_config()?,
            profiles: self.profiles,
            rope_mode: self.rope_mode,
            eps: self.eps,
            final_norm: self.final_norm,
            extraction: self.extraction,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::Protocol(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Digest over the canonical JSON form; the wire protocol checks it so
    /// client and server agree on what is being evaluated.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_digest() {
        let cfg = RunConfig::desk();
        let json = cfg.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());

        let mut other = cfg.clone();
        other.seed = 8;
        assert_ne!(cfg.digest(), other.digest());
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut cfg = RunConfig::desk();
        cfg.model.heads = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk();
        cfg.model.seq_len = cfg.params.slot_count() + 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bias_modes() {
        let mut cfg = RunConfig::desk();
        let s = cfg.model.seq_len as f64;
        assert!((cfg.bias() + s.ln()).abs() < 1e-12);
        cfg.bias_mode = BiasMode::PosLogSeq;
        assert!((cfg.bias() - s.ln()).abs() < 1e-12);
        cfg.bias_mode = BiasMode::Custom(0.25);
        assert_eq!(cfg.bias(), 0.25);
    }

    #[test]
    fn kernel_parsing() {
        for name in [
            "pcmm",
            "ccmm",
            "rope",
            "attention",
            "rmsnorm",
            "ffn",
            "layer",
        ] {
            let k: Kernel = name.parse().unwrap();
            assert_eq!(k.to_string(), name);
        }
        assert!("softmax".parse::<Kernel>().is_err());
    }
}
