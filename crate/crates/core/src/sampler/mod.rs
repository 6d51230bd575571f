//! Deterministic x0-parameterised sampling with clothes-posterior or Gaussian
//! starts, classifier-free guidance and FreeU.

pub mod freeu;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use freeu::{freeu_reweight, FreeU};

use crate::error::{shape_err, Error, Result};
use crate::image::Raster;
use crate::latentspace::Autoencoder;
use crate::nn::randn;
use crate::tryondiffusion::conditions::Conditions;
use crate::tryondiffusion::input::{build_denoising_input, Branch};
use crate::tryondiffusion::model::DiffusionModel;
use crate::tryondiffusion::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Gaussian,
    #[serde(alias = "posterior")]
    ClothesPosterior,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Gaussian => "gaussian",
            InitMode::ClothesPosterior => "clothes_posterior",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InitMode::Gaussian),
            "posterior" | "clothes_posterior" => Ok(InitMode::ClothesPosterior),
            other => Err(Error::Argument(format!("unknown init mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub init_mode: InitMode,
    pub guidance_scale: f64,
    pub freeu: Option<FreeU>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            init_mode: InitMode::ClothesPosterior,
            guidance_scale: 1.0,
            freeu: Some(FreeU::default()),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize, errors: &mut Vec<String>) {
        if self.steps == 0 || self.steps > timesteps {
            errors.push(format!("sampler.steps must lie in 1..={timesteps}"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            errors.push("sampler.guidance_scale must be non-negative".into());
        }
        if let Some(f) = &self.freeu {
            if f.validate().is_err() {
                errors.push("sampler.freeu factors must be positive".into());
            }
        }
    }
}

/// `sqrt(ᾱ_T)·E(C^w) + sqrt(1 - ᾱ_T)·eps`.
pub fn init_posterior_noise(prior_latent: &Tensor, alpha_bar_t: f64, eps: &Tensor) -> Result<Tensor> {
    if prior_latent.dims() != eps.dims() {
        return shape_err(format!("latent {:?} vs eps {:?}", prior_latent.dims(), eps.dims()));
    }
    Ok((prior_latent.affine(alpha_bar_t.sqrt(), 0.0)? + eps.affine((1.0 - alpha_bar_t).sqrt(), 0.0)?)?)
}

pub fn init_gaussian_noise(shape: &[usize], seed: u64) -> Result<Tensor> {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, DType::F32)
}

/// One deterministic step from `t` to `t_prev` given an x0 estimate.
pub fn ddim_step_x0(z_t: &Tensor, x0_hat: &Tensor, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::Argument(format!("step from {t} to {t_prev} does not go backwards")));
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_p = schedule.alpha_bar(t_prev)?;
    if t_prev == 0 && a_p == 1.0 {
        return Ok(x0_hat.clone());
    }
    let eps_hat = ((z_t - x0_hat.affine(a_t.sqrt(), 0.0)?)? / (1.0 - a_t).sqrt())?;
    Ok((x0_hat.affine(a_p.sqrt(), 0.0)? + eps_hat.affine((1.0 - a_p).sqrt(), 0.0)?)?)
}

/// `uncond + scale·(cond - uncond)`; scale 1 returns `cond` untouched.
pub fn cfg_combine(pred_cond: &Tensor, pred_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if pred_cond.dims() != pred_uncond.dims() {
        return shape_err(format!("{:?} vs {:?}", pred_cond.dims(), pred_uncond.dims()));
    }
    if scale == 1.0 {
        return Ok(pred_cond.clone());
    }
    if scale == 0.0 {
        return Ok(pred_uncond.clone());
    }
    Ok((pred_uncond + (pred_cond - pred_uncond)?.affine(scale, 0.0)?)?)
}

/// Uniformly spaced time steps from `T` down to 0 (`steps + 1` entries).
pub fn timestep_sequence(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::Argument(format!("{steps} sampling steps with {timesteps} time steps")));
    }
    Ok((0..=steps)
        .rev()
        .map(|i| ((i as f64) * timesteps as f64 / steps as f64).round() as usize)
        .collect())
}

/// Runs the deterministic trajectory from `z_T`; `denoise(z_t, t)` returns
/// the x0 estimate. `trace` receives every intermediate estimate.
pub fn run_trajectory(
    z_start: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    mut denoise: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    mut trace: Option<&mut dyn FnMut(usize, usize, &Tensor) -> Result<()>>,
) -> Result<Tensor> {
    let seq = timestep_sequence(schedule.steps, steps)?;
    let mut z = z_start.clone();
    for (k, pair) in seq.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let x0 = denoise(&z, t)?;
        if let Some(f) = trace.as_mut() {
            f(k, t, &x0)?;
        }
        z = ddim_step_x0(&z, &x0, t, t_prev, schedule)?;
    }
    Ok(z)
}

/// Starting latents for a batch; every row's noise is seeded by its query id,
/// so results do not depend on batching.
pub fn initial_latents(
    conditions: &Conditions,
    rows: &[usize],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let (_, h, w, c) = conditions.z0_prior.dims4()?;
    let mut eps = Vec::with_capacity(rows.len());
    for &r in rows {
        let seed = crate::seeds::derive_seed(config.seed, &[crate::seeds::label(&conditions.ids[r])]);
        eps.push(init_gaussian_noise(&[1, h, w, c], seed)?);
    }
    let eps = Tensor::cat(&eps, 0)?.to_dtype(conditions.z0_prior.dtype())?;
    match config.init_mode {
        InitMode::Gaussian => Ok(eps),
        InitMode::ClothesPosterior => {
            let ix = Tensor::from_vec(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), rows.len(), &Device::Cpu)?;
            let prior = conditions.z0_prior.index_select(&ix, 0)?;
            init_posterior_noise(&prior, schedule.alpha_bar(schedule.steps)?, &eps)
        }
    }
}

/// Samples latents for `conditions` rows `[start, start + len)`.
pub fn sample_latents(
    model: &DiffusionModel,
    conditions: &Conditions,
    start: usize,
    len: usize,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    trace: Option<&mut dyn FnMut(usize, usize, &Tensor) -> Result<()>>,
) -> Result<Tensor> {
    let mut errors = Vec::new();
    config.validate(schedule.steps, &mut errors);
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let rows: Vec<usize> = (start..start + len).collect();
    let batch = conditions.select(&rows)?;
    let modules = model.modules();
    let null_tokens = modules.tokens.null_sequence(len)?;
    let cond_tokens = if model.arch.global_cond {
        modules.tokens.forward(&batch.token_feats, &vec![false; len])?
    } else {
        null_tokens.clone()
    };
    let z_start = initial_latents(conditions, &rows, config, schedule)?;
    let freeu = config.freeu.as_ref();
    let denoise = |z: &Tensor, t: usize| -> Result<Tensor> {
        let input = build_denoising_input(z, &batch.local, &batch.m_r, Branch::Main, vec![t; len])?;
        let cond = modules.predict(&input, &cond_tokens, freeu)?;
        if config.guidance_scale == 1.0 {
            return Ok(cond);
        }
        let uncond = modules.predict(&input, &null_tokens, freeu)?;
        cfg_combine(&cond, &uncond, config.guidance_scale)
    };
    run_trajectory(&z_start, schedule, config.steps, denoise, trace)
}

/// Samples decoded try-on images for every row of `conditions`.
pub fn sample_images(
    model: &DiffusionModel,
    ae: &Autoencoder,
    conditions: &Conditions,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Vec<Raster>> {
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(conditions.len());
    let mut start = 0;
    while start < conditions.len() {
        let len = CHUNK.min(conditions.len() - start);
        let z = sample_latents(model, conditions, start, len, schedule, config, None)?;
        out.extend(Raster::unbatch(&ae.decode_tensor(&z)?)?);
        start += len;
    }
    Ok(out)
}

/// Samples one query, writing per-step x0 decodes into `trace_dir` when given.
pub fn sample_traced(
    model: &DiffusionModel,
    ae: &Autoencoder,
    conditions: &Conditions,
    row: usize,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    trace_dir: Option<&Path>,
) -> Result<Raster> {
    let z = match trace_dir {
        Some(dir) => {
            crate::io::ensure_dir(dir)?;
            let mut write = |k: usize, t: usize, x0: &Tensor| -> Result<()> {
                let img = Raster::from_tensor(&ae.decode_tensor(x0)?)?;
                let path: PathBuf = dir.join(format!("step{k:03}_t{t:04}.png"));
                img.save_png(&path)
            };
            sample_latents(model, conditions, row, 1, schedule, config, Some(&mut write))?
        }
        None => sample_latents(model, conditions, row, 1, schedule, config, None)?,
    };
    Raster::from_tensor(&ae.decode_tensor(&z)?)
}
