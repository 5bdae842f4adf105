//! Pre-norm ViT block whose attention weights are captured for localization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::tensor::{Float, Tensor, Var};

/// Head-averaged post-softmax attention of one layer, `[planes, T, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T: Float = f32> {
    pub layer: usize,
    pub maps: Tensor<T>,
}

impl<T: Float> AttentionRecord<T> {
    pub fn planes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn plane(&self, n: usize) -> Result<Tensor<T>> {
        let t = self.tokens();
        self.maps.narrow(0, n, 1)?.reshape(&[t, t])
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", dim, heads)));
        }
        Ok(MultiHeadAttention {
            dim,
            heads,
            qkv: Linear::new(store, &format!("{prefix}.qkv"), dim, 3 * dim, true, 0.02, rng),
            proj: Linear::new(store, &format!("{prefix}.proj"), dim, dim, true, 0.02, rng),
        })
    }

    /// `x: [B, T, D]` → projected output and per-head weights `[B, H, T, T]`.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(
                "attention",
                format!("expected [B, T, {}], got {:?}", self.dim, s),
            ));
        }
        let (b, t, d, h) = (s[0], s[1], self.dim, self.heads);
        let dh = d / h;
        let qkv = self
            .qkv
            .forward(p, x)?
            .reshape(&[b, t, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i| -> Result<Var<'t, T>> { qkv.narrow(0, i, 1)?.reshape(&[b, h, t, dh]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q
            .matmul(k.transpose(2, 3)?)?
            .scale(T::of(1.0 / (dh as f64).sqrt()));
        let weights = scores.softmax(3)?;
        let out = weights
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        Ok((self.proj.forward(p, out)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            dim,
            heads,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim),
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), dim, 4 * dim, true, 0.02, rng),
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), 4 * dim, dim, true, 0.02, rng),
        })
    }

    /// `x: [B, T, D]` → block output and head-averaged attention `[B, T, T]`.
    /// With `expected_len`, the token count is checked first.
    pub fn forward<'t, T: Float>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        expected_len: Option<usize>,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(
                "transformer_block",
                format!("expected [B, T, {}], got {:?}", self.dim, s),
            ));
        }
        if let Some(len) = expected_len {
            if s[1] != len {
                return Err(Error::shape(
                    "transformer_block",
                    format!("sequence length {} != {}", s[1], len),
                ));
            }
        }
        let (attn, weights) = self.attn.forward(p, self.norm1.forward(p, x)?)?;
        let x = x.add(attn)?;
        let hidden = self.fc1.forward(p, self.norm2.forward(p, x)?)?.gelu();
        let x = x.add(self.fc2.forward(p, hidden)?)?;
        Ok((x, head_mean(&weights.value(), self.heads)))
    }
}

/// `[B, H, T, T]` → `[B, T, T]`, heads summed in order then divided.
fn head_mean<T: Float>(w: &Tensor<T>, heads: usize) -> Tensor<T> {
    let s = w.shape();
    let (b, t) = (s[0], s[2]);
    let plane = t * t;
    let inv = T::of(1.0 / heads as f64);
    let mut out = vec![T::zero(); b * plane];
    for bi in 0..b {
        let dst = &mut out[bi * plane..(bi + 1) * plane];
        for hi in 0..heads {
            let src = &w.data()[(bi * heads + hi) * plane..(bi * heads + hi + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::from_parts(vec![b, t, t], out)
}
