use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::input::DenoisingInput;
use super::tokens::{GlobalTokens, TokenArch, TokenProjection};
use super::unet::{UNet, UNetArch};
use crate::error::{Error, Result};
use crate::nn::{Builder, Checkpoint, CheckpointMeta, ParamStore};
use crate::sampler::freeu::FreeU;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionArch {
    pub unet: UNetArch,
    pub tokens: TokenArch,
    /// Token sequence length; fixed by the canvas.
    pub token_length: usize,
    /// False when trained without the global condition; sampling then
    /// always feeds the null sequence.
    pub global_cond: bool,
}

impl Default for DiffusionArch {
    fn default() -> Self {
        let tokens = TokenArch::default();
        Self {
            unet: UNetArch::default(),
            token_length: tokens.length(64, 48),
            tokens,
            global_cond: true,
        }
    }
}

impl DiffusionArch {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.token_length == 0 || self.tokens.token_dim != self.unet.token_dim {
            return Err(Error::Validation(vec![format!(
                "token length {} / width {} incompatible with unet token width {}",
                self.token_length, self.tokens.token_dim, self.unet.token_dim
            )]));
        }
        Ok(())
    }
}

/// Trainable pieces of the try-on model.
#[derive(Debug, Clone)]
pub struct DiffusionModules {
    pub unet: UNet,
    pub tokens: TokenProjection,
}

impl DiffusionModules {
    pub fn build(b: &mut Builder, arch: &DiffusionArch) -> Result<Self> {
        Ok(Self {
            unet: UNet::build(b, &arch.unet)?,
            tokens: TokenProjection::build(b, &arch.tokens, arch.token_length)?,
        })
    }

    /// `U(ψ_t, V(C))`: the z0 estimate for a denoising input.
    pub fn predict(&self, input: &DenoisingInput, tokens: &GlobalTokens, freeu: Option<&FreeU>) -> Result<Tensor> {
        self.unet.forward(&input.stacked()?, &input.t, &tokens.tokens, freeu)
    }
}

/// UNet plus token projection with parameters; `modules` are frozen views.
pub struct DiffusionModel {
    pub arch: DiffusionArch,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
    modules: DiffusionModules,
}

impl DiffusionModel {
    pub fn new(arch: DiffusionArch, seed: u64, dtype: DType) -> Result<Self> {
        let meta = CheckpointMeta {
            role: "diffusion".into(),
            seed,
            step: 0,
            loss: f64::NAN,
            trained: false,
            config_fingerprint: String::new(),
        };
        Self::from_parts(arch, ParamStore::new(seed, dtype), meta)
    }

    pub fn from_parts(arch: DiffusionArch, mut params: ParamStore, meta: CheckpointMeta) -> Result<Self> {
        arch.validate()?;
        let modules = DiffusionModules::build(&mut Builder::new(&mut params, true), &arch)?;
        Ok(Self {
            arch,
            params,
            meta,
            modules,
        })
    }

    pub fn trainable(&mut self) -> Result<DiffusionModules> {
        DiffusionModules::build(&mut Builder::new(&mut self.params, false), &self.arch)
    }

    pub fn modules(&self) -> &DiffusionModules {
        &self.modules
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_parts(self.arch.clone(), self.params.to_dtype(dtype)?, self.meta.clone())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !crate::nn::checkpoint_exists(dir) {
            return Err(Error::dependency(format!("diffusion checkpoint at {}", dir.display()), "train-diffusion"));
        }
        let ck: Checkpoint<DiffusionArch> = Checkpoint::load(dir, DType::F32)?;
        Self::from_parts(ck.arch, ck.params, ck.meta)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Checkpoint {
            arch: self.arch.clone(),
            meta: self.meta.clone(),
            params: self.params.to_dtype(DType::F32)?,
        }
        .save(dir)
    }

    pub fn hash(&self) -> Result<String> {
        self.params.hash()
    }
}
