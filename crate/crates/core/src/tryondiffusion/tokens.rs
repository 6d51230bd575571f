//! Global garment condition: pooled features of a frozen convolutional
//! backbone, then a trainable linear projection.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::latentspace::{Autoencoder, FeatureExtractor};
use crate::nn::{avg_pool, Builder, Init, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenArch {
    /// Backbone tap used (0 = stride 2, 1 = stride 4, 2 = stride 8).
    pub tap: usize,
    /// Pooling factor applied to the tap before flattening into tokens.
    pub pool: usize,
    pub feature_dim: usize,
    pub token_dim: usize,
}

impl Default for TokenArch {
    fn default() -> Self {
        Self {
            tap: 2,
            pool: 2,
            feature_dim: 32,
            token_dim: 32,
        }
    }
}

impl TokenArch {
    /// Sequence length for a canvas of the given size.
    pub fn length(&self, height: usize, width: usize) -> usize {
        let s = (2usize << self.tap) * self.pool;
        (height / s) * (width / s)
    }
}

/// Token sequences for a batch; `null[i]` marks dropped (unconditional) rows.
#[derive(Debug, Clone)]
pub struct GlobalTokens {
    /// `(B, L, d_tok)`.
    pub tokens: Tensor,
    pub null: Vec<bool>,
}

/// Frozen part of the tokenizer: `(B, L, feature_dim)` pooled backbone
/// features of the flat garment.
pub fn backbone_features(backbone: &Autoencoder, arch: &TokenArch, c: &Tensor) -> Result<Tensor> {
    let taps = backbone.encoder().features(c)?;
    let Some(tap) = taps.get(arch.tap) else {
        return shape_err(format!("backbone has no tap {}", arch.tap));
    };
    let pooled = avg_pool(&tap.detach(), arch.pool)?;
    let (b, h, w, f) = pooled.dims4()?;
    if f != arch.feature_dim {
        return shape_err(format!("backbone tap has {f} channels, token arch expects {}", arch.feature_dim));
    }
    Ok(pooled.reshape((b, h * w, f))?)
}

/// Trainable half: projection, learned positions and the null sequence.
#[derive(Debug, Clone)]
pub struct TokenProjection {
    proj: Linear,
    pos: Tensor,
    null: Tensor,
    length: usize,
}

impl TokenProjection {
    pub fn build(b: &mut Builder, arch: &TokenArch, length: usize) -> Result<Self> {
        let mut b = b.push("tokens");
        Ok(Self {
            proj: Linear::new(&mut b, "proj", arch.feature_dim, arch.token_dim)?,
            pos: b.param("pos", &[length, arch.token_dim], Init::Normal(0.02))?,
            null: b.param("null", &[length, arch.token_dim], Init::Normal(0.02))?,
            length,
        })
    }

    pub fn null_sequence(&self, batch: usize) -> Result<GlobalTokens> {
        let (l, d) = self.null.dims2()?;
        Ok(GlobalTokens {
            tokens: self.null.unsqueeze(0)?.broadcast_as((batch, l, d))?.contiguous()?,
            null: vec![true; batch],
        })
    }

    /// Projects backbone features; rows with `drop[i]` get the null sequence.
    pub fn forward(&self, feats: &Tensor, drop: &[bool]) -> Result<GlobalTokens> {
        let (b, l, _) = feats.dims3()?;
        if l != self.length || drop.len() != b {
            return shape_err(format!("{l} tokens x {b} rows, expected {} tokens and {} drop flags", self.length, drop.len()));
        }
        let cond = self.proj.forward(feats)?.broadcast_add(&self.pos)?;
        if !drop.iter().any(|d| *d) {
            return Ok(GlobalTokens {
                tokens: cond,
                null: drop.to_vec(),
            });
        }
        let keep: Vec<f32> = drop.iter().map(|d| if *d { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1), feats.device())?.to_dtype(cond.dtype())?;
        let null = self.null.unsqueeze(0)?.broadcast_as(cond.dims())?;
        let tokens = (cond.broadcast_mul(&keep)? + null.broadcast_mul(&keep.affine(-1.0, 1.0)?)?)?;
        Ok(GlobalTokens {
            tokens,
            null: drop.to_vec(),
        })
    }
}

/// Full tokenizer pass on flat garments `c` of shape `(B, H, W, 3)`.
pub fn global_encode(
    c: &Tensor,
    backbone: &Autoencoder,
    arch: &TokenArch,
    proj: &TokenProjection,
    drop: &[bool],
) -> Result<GlobalTokens> {
    proj.forward(&backbone_features(backbone, arch, c)?, drop)
}

/// Mean squared distance between two token sequences.
pub fn token_distance(a: &GlobalTokens, b: &GlobalTokens) -> Result<f64> {
    let d = (&a.tokens - &b.tokens)?.sqr()?.mean(D::Minus1)?.mean_all()?;
    Ok(d.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
