//! Non-interactive encrypted inference for ternary-weight transformer layers.
//!
//! The crate is organised in layers:
//!
//! * [`params`], [`keys`], [`engine`] — a pluggable homomorphic evaluator with
//!   two interchangeable backends: an exact plaintext `clear` backend (the
//!   oracle) and a minimal leveled RNS-CKKS backend. Both expose identical
//!   slot semantics, level accounting and operation counting.
//! * [`packing`] — column-wise encoding of matrices into ciphertext columns,
//!   plus ternary weight matrices.
//! * [`linalg`] — encrypted matrix kernels: addition-only plaintext-ciphertext
//!   matmul, outer-product ciphertext-ciphertext matmul with logarithmic slot
//!   broadcast, and Hadamard products.
//! * [`approx`] — Chebyshev fitting and Paterson-Stockmeyer evaluation of
//!   scalar nonlinearities (sigmoid, SiLU, sqrt, inverse).
//! * [`blocks`] — transformer building blocks over packed matrices: RoPE,
//!   sigmoid attention, RMSNorm with an embedded level refresh, SwiGLU, and a
//!   full layer.
//! * [`metrics`] — operation counters and level tracking shared by every
//!   kernel.
//! * [`config`], [`io`], [`net`] — run configuration, binary file formats and
//!   the one-request/one-response client-server protocol.
//!
//! All randomness is seeded; a fixed seed reproduces keys, weights and every
//! counter exactly.

pub mod approx;
pub mod blocks;
mod ckks;
mod clear;
pub mod config;
pub mod engine;
pub mod io;
pub mod keys;
pub mod linalg;
pub mod metrics;
#[cfg(not(target_arch = "wasm32"))]
pub mod net;
pub mod packing;
pub mod params;
pub mod reference;

mod error;

pub use engine::{Ciphertext, Engine, Plaintext};
pub use error::{Error, Result};
pub use keys::KeyMaterial;
pub use metrics::{CounterSnapshot, LevelTracker, OpCounters, StageRecord};
pub use params::{BackendKind, HeParams};
