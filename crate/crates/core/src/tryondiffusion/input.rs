use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Which starting latent was noised: the try-on image or the warped garment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Main,
    Prior,
}

/// UNet input for one batch: noised latent, local condition and region mask,
/// all `(B, h, w, ·)` on the latent grid.
#[derive(Debug, Clone)]
pub struct DenoisingInput {
    pub z_t: Tensor,
    pub local_cond: Tensor,
    pub m_r: Tensor,
    pub branch: Branch,
    pub t: Vec<usize>,
}

pub fn build_denoising_input(
    z_t: &Tensor,
    local_cond: &Tensor,
    m_r: &Tensor,
    branch: Branch,
    t: Vec<usize>,
) -> Result<DenoisingInput> {
    let (b, h, w, c) = z_t.dims4()?;
    if local_cond.dims() != z_t.dims() {
        return shape_err(format!("local condition {:?} vs latent {:?}", local_cond.dims(), z_t.dims()));
    }
    if m_r.dims() != [b, h, w, 1] {
        return shape_err(format!("mask {:?} vs latent grid ({b}, {h}, {w}, 1)", m_r.dims()));
    }
    if t.len() != b {
        return shape_err(format!("{} time steps for batch of {b}", t.len()));
    }
    debug_assert!(c > 0);
    Ok(DenoisingInput {
        z_t: z_t.clone(),
        local_cond: local_cond.clone(),
        m_r: m_r.clone(),
        branch,
        t,
    })
}

impl DenoisingInput {
    pub fn latent_channels(&self) -> usize {
        self.z_t.dims()[3]
    }

    /// `[z_t ; local_cond ; m_r]` along channels.
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.z_t, &self.local_cond, &self.m_r], 3)?)
    }
}
