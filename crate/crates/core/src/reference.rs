//! Plaintext reference implementations, independent of the encrypted path.
//!
//! Two flavours per block:
//! * exact math (`rmsnorm`, `sigmoid_attention`, ...) — ground truth for
//!   accuracy checks, with true sqrt/division/sigmoid;
//! * protocol mirrors (`*_protocol`) — the same arithmetic the encrypted
//!   kernels perform, including the fitted polynomials, in plain f64. The
//!   clear backend must match these to float precision.
//!
//! Matrices are row-major `&[f64]` with explicit dimensions.

use crate::approx::ChebyshevApprox;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn matmul(x: &[f64], w: &[f64], s: usize, d: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), s * d);
    debug_assert_eq!(w.len(), d * m);
    let mut out = vec![0.0; s * m];
    for i in 0..s {
        for j in 0..d {
            let xv = x[i * d + j];
            if xv == 0.0 {
                continue;
            }
            for c in 0..m {
                out[i * m + c] += xv * w[j * m + c];
            }
        }
    }
    out
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Per-pair rotation tables: `cos[k][pos] = cos(pos * theta_k)` with
/// `theta_k = base^(-2k/d_head)`.
pub fn rope_tables(seq_len: usize, head_dim: usize, base: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(pairs);
    let mut sin = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let theta = base.powf(-2.0 * k as f64 / head_dim as f64);
        cos.push((0..seq_len).map(|p| (p as f64 * theta).cos()).collect());
        sin.push((0..seq_len).map(|p| (p as f64 * theta).sin()).collect());
    }
    (cos, sin)
}

/// Rotary position embedding on one head (s x d_head), pairing adjacent
/// coordinates (2k, 2k+1) and rotating by the position-dependent angle.
pub fn rope(x: &[f64], s: usize, head_dim: usize, base: f64) -> Vec<f64> {
    debug_assert_eq!(head_dim % 2, 0);
    let (cos, sin) = rope_tables(s, head_dim, base);
    let mut out = vec![0.0; s * head_dim];
    for pos in 0..s {
        for k in 0..head_dim / 2 {
            let a = x[pos * head_dim + 2 * k];
            let b = x[pos * head_dim + 2 * k + 1];
            out[pos * head_dim + 2 * k] = a * cos[k][pos] - b * sin[k][pos];
            out[pos * head_dim + 2 * k + 1] = b * cos[k][pos] + a * sin[k][pos];
        }
    }
    out
}

/// Multi-head attention with elementwise `sigma(qk * scale + bias)` in place
/// of the row-normalized softmax. `q`, `k`, `v` are s x d; heads split d.
/// `scale` is usually `1/sqrt(d/heads)`.
pub fn sigmoid_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    heads: usize,
    scale: f64,
    bias: f64,
) -> Vec<f64> {
    attention_with(q, k, v, s, d, heads, scale, |u| sigmoid(u + bias))
}

pub(crate) fn attention_with(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    heads: usize,
    scale: f64,
    act: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let hd = d / heads;
    let mut out = vec![0.0; s * d];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..s {
            for j in 0..s {
                let mut score = 0.0;
                for c in 0..hd {
                    score += q[i * d + off + c] * k[j * d + off + c];
                }
                let w = act(score * scale);
                for c in 0..hd {
                    out[i * d + off + c] += w * v[j * d + off + c];
                }
            }
        }
    }
    out
}

/// RMSNorm, exact: `y[i][j] = x[i][j] / (sqrt(mean_k x[i][k]^2) + eps) * gamma[j]`.
pub fn rmsnorm(x: &[f64], gamma: &[f64], eps: f64, s: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        let ms: f64 = (0..d).map(|j| x[i * d + j] * x[i * d + j]).sum::<f64>() / d as f64;
        let denom = ms.sqrt() + eps;
        for j in 0..d {
            out[i * d + j] = x[i * d + j] / denom * gamma[j];
        }
    }
    out
}

/// Gated feed-forward, exact: `(X W1) .* silu(X W2) W3`.
pub fn swiglu_ffn(
    x: &[f64],
    w1: &[f64],
    w2: &[f64],
    w3: &[f64],
    s: usize,
    d: usize,
    f: usize,
) -> Vec<f64> {
    let gate = matmul(x, w1, s, d, f);
    let up = matmul(x, w2, s, d, f);
    let act: Vec<f64> = up.iter().map(|&u| silu(u)).collect();
    let h = hadamard(&gate, &act);
    matmul(&h, w3, s, f, d)
}

/// Full pre-norm layer, exact math (true sqrt/division/sigmoid everywhere).
pub fn transformer_layer(
    x: &[f64],
    w: &crate::blocks::LayerWeights,
    cfg: &crate::blocks::LayerConfig,
) -> Vec<f64> {
    layer_with(x, w, cfg, None)
}

/// Full pre-norm layer mirroring the encrypted protocol: every nonlinearity
/// goes through the same fitted polynomials.
pub fn transformer_layer_protocol(
    x: &[f64],
    w: &crate::blocks::LayerWeights,
    cfg: &crate::blocks::LayerConfig,
    fits: &crate::blocks::FittedSet,
) -> Vec<f64> {
    layer_with(x, w, cfg, Some(fits))
}

fn layer_with(
    x: &[f64],
    w: &crate::blocks::LayerWeights,
    cfg: &crate::blocks::LayerConfig,
    fits: Option<&crate::blocks::FittedSet>,
) -> Vec<f64> {
    let s = cfg.attention.seq_len;
    let d = cfg.attention.model_dim;
    let f = w.ffn_dim();
    let heads = cfg.attention.heads;
    let hd = d / heads;
    let scale = cfg.attention.score_scale();

    let norm = |x: &[f64], gamma: &[f64]| -> Vec<f64> {
        match fits {
            None => rmsnorm(x, gamma, cfg.eps, s, d),
            Some(fs) => rmsnorm_protocol(x, gamma, cfg.eps, s, d, &fs.sqrt, &fs.inverse),
        }
    };

    let x1 = norm(x, &w.gamma_attn);
    let mut q = matmul(&x1, &w.wq.to_f64(), s, d, d);
    let mut k = matmul(&x1, &w.wk.to_f64(), s, d, d);
    let v = matmul(&x1, &w.wv.to_f64(), s, d, d);

    for h in 0..heads {
        for m in [&mut q, &mut k] {
            let mut head = vec![0.0; s * hd];
            for i in 0..s {
                head[i * hd..(i + 1) * hd]
                    .copy_from_slice(&m[i * d + h * hd..i * d + (h + 1) * hd]);
            }
            let rotated = rope(&head, s, hd, w.rope_base);
            for i in 0..s {
                m[i * d + h * hd..i * d + (h + 1) * hd]
                    .copy_from_slice(&rotated[i * hd..(i + 1) * hd]);
            }
        }
    }

    let attn = match fits {
        None => sigmoid_attention(&q, &k, &v, s, d, heads, scale, cfg.attention.bias),
        Some(fs) => sigmoid_attention_protocol(&q, &k, &v, s, d, heads, scale, &fs.sigmoid),
    };
    let projected = matmul(&attn, &w.wo.to_f64(), s, d, d);
    let x2: Vec<f64> = x.iter().zip(&projected).map(|(a, b)| a + b).collect();

    let x3 = norm(&x2, &w.gamma_ffn);
    let ffn = match fits {
        None => swiglu_ffn(&x3, &w.w1.to_f64(), &w.w2.to_f64(), &w.w3.to_f64(), s, d, f),
        Some(fs) => swiglu_ffn_protocol(
            &x3,
            &w.w1.to_f64(),
            &w.w2.to_f64(),
            &w.w3.to_f64(),
            s,
            d,
            f,
            &fs.silu_sigmoid,
        ),
    };
    let x4: Vec<f64> = x2.iter().zip(&ffn).map(|(a, b)| a + b).collect();
    if cfg.final_norm {
        norm(&x4, &w.gamma_final)
    } else {
        x4
    }
}

// ── protocol mirrors ──────────────────────────────────────────────────────

/// RMSNorm as the encrypted protocol computes it: fitted sqrt / inverse in
/// place of exact ones, eps added after the sqrt.
pub fn rmsnorm_protocol(
    x: &[f64],
    gamma: &[f64],
    eps: f64,
    s: usize,
    d: usize,
    sqrt_fit: &ChebyshevApprox,
    inv_fit: &ChebyshevApprox,
) -> Vec<f64> {
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        let ms: f64 = (0..d).map(|j| x[i * d + j] * x[i * d + j]).sum::<f64>() / d as f64;
        let inv = inv_fit.eval(sqrt_fit.eval(ms) + eps);
        for j in 0..d {
            out[i * d + j] = x[i * d + j] * inv * gamma[j];
        }
    }
    out
}

/// Sigmoid attention with the fitted sigmoid; the bias lives inside the fit,
/// exactly as on the encrypted path.
pub fn sigmoid_attention_protocol(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    heads: usize,
    scale: f64,
    sig_fit: &ChebyshevApprox,
) -> Vec<f64> {
    attention_with(q, k, v, s, d, heads, scale, |u| sig_fit.eval(u))
}

/// SwiGLU with the fitted sigmoid inside SiLU.
pub fn swiglu_ffn_protocol(
    x: &[f64],
    w1: &[f64],
    w2: &[f64],
    w3: &[f64],
    s: usize,
    d: usize,
    f: usize,
    sig_fit: &ChebyshevApprox,
) -> Vec<f64> {
    let gate = matmul(x, w1, s, d, f);
    let up = matmul(x, w2, s, d, f);
    let act: Vec<f64> = up.iter().map(|&u| u * sig_fit.eval(u)).collect();
    let h = hadamard(&gate, &act);
    matmul(&h, w3, s, f, d)
}
