use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::flowwarp::{FlattenTrainConfig, WarpTrainConfig};
use crate::latentspace::AutoencoderConfig;
use crate::sampler::{FreeU, InitMode, SamplerConfig};
use crate::synthgen::DatasetConfig;
use crate::tryondiffusion::{AblationFlags, DiffusionConfig};

/// Environment variable overriding [`RunConfig::output_root`].
pub const OUTPUT_ROOT_ENV: &str = "TRYON_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance_scale: f64,
    pub freeu_factors: FreeU,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            steps: s.steps,
            guidance_scale: s.guidance_scale,
            freeu_factors: FreeU::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate at most this many test queries (all when absent).
    pub max_samples: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_samples: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub prior_branch: bool,
    pub cons_loss: bool,
    pub global_cond: bool,
    pub init_mode: InitMode,
    pub freeu: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        let f = AblationFlags::default();
        Self {
            prior_branch: f.prior_branch,
            cons_loss: f.cons_loss,
            global_cond: f.global_cond,
            init_mode: InitMode::ClothesPosterior,
            freeu: true,
        }
    }
}

impl Ablation {
    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            prior_branch: self.prior_branch,
            cons_loss: self.cons_loss,
            global_cond: self.global_cond,
        }
    }
}

/// Every stage's settings in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    pub data: DatasetConfig,
    pub autoencoder: AutoencoderConfig,
    pub warp: WarpTrainConfig,
    pub flatten: FlattenTrainConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("runs/default"),
            data: DatasetConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            warp: WarpTrainConfig::default(),
            flatten: FlattenTrainConfig::default(),
            diffusion: DiffusionConfig::default(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
            ablation: Ablation::default(),
        }
    }
}

fn unknown_keys(input: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(a), Value::Object(b)) = (input, reference) {
        for (k, v) in a {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match b.get(k) {
                Some(r) => unknown_keys(v, r, &p, out),
                None => out.push(format!("unknown key `{p}`")),
            }
        }
    }
}

impl RunConfig {
    /// Parses JSON text: missing keys take defaults, every unknown key is
    /// reported, then the values are validated.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let mut errors = Vec::new();
        unknown_keys(&value, &serde_json::to_value(RunConfig::default())?, "", &mut errors);
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Validation(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let Err(e) = self.data.canvas.validate() {
            errors.push(format!("data.canvas: {e}"));
        }
        if self.data.count < 2 || !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            errors.push("data.count must be at least 2 and data.train_fraction inside (0, 1)".into());
        }
        self.autoencoder.validate(&mut errors);
        self.warp.validate("warp", &mut errors);
        self.flatten.validate("flatten", &mut errors);
        self.diffusion.validate(&mut errors);
        self.sampler_config(self.ablation.init_mode).validate(self.diffusion.timesteps, &mut errors);
        if self.sampler.freeu_factors.validate().is_err() {
            errors.push("sampler.freeu_factors must be positive".into());
        }
        if self.eval.max_samples == Some(0) {
            errors.push("eval.max_samples must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Applies the output-root environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                self.output_root = PathBuf::from(root);
            }
        }
        self
    }

    pub fn diffusion_config(&self) -> DiffusionConfig {
        let mut d = self.diffusion.clone();
        d.flags = self.ablation.flags();
        d
    }

    pub fn sampler_config(&self, init_mode: InitMode) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            init_mode,
            guidance_scale: self.sampler.guidance_scale,
            freeu: self.ablation.freeu.then_some(self.sampler.freeu_factors),
            seed: crate::seeds::derive_seed(self.seed, &[5]),
        }
    }

    /// Hash of the settings that determine a stage's output, so a checkpoint
    /// can be matched against the config asking for it.
    pub fn fingerprint(&self, stage: Stage) -> Result<String> {
        let mut parts = vec![serde_json::to_value(self.seed)?, serde_json::to_value(&self.data)?];
        if stage >= Stage::Autoencoder {
            parts.push(serde_json::to_value(&self.autoencoder)?);
        }
        if stage >= Stage::Warp {
            parts.push(serde_json::to_value(&self.warp)?);
        }
        if stage >= Stage::Flatten {
            parts.push(serde_json::to_value(&self.flatten)?);
        }
        if stage >= Stage::Diffusion {
            parts.push(serde_json::to_value(&self.diffusion)?);
            parts.push(serde_json::to_value(self.ablation.flags())?);
        }
        Ok(crate::io::sha256_hex(&serde_json::to_vec(&parts)?)[..16].to_string())
    }
}

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Autoencoder,
    Warp,
    Flatten,
    Diffusion,
}
