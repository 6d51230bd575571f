use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::{Autoencoder, AutoencoderArch};
use crate::error::{Error, Result};
use crate::flowwarp::field::apply_flow;
use crate::image::Raster;
use crate::nn::randn;
use crate::synthgen::SamplePair;
use crate::train::{LrSchedule, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub arch: AutoencoderArch,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub kl_weight: f64,
    pub log_every: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            arch: AutoencoderArch::default(),
            steps: 1500,
            batch_size: 16,
            lr: LrSchedule {
                base: 2e-3,
                warmup_steps: 50,
                hold_fraction: 0.3,
                final_fraction: 0.05,
            },
            kl_weight: 1e-6,
            log_every: 10,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if let Err(Error::Validation(e)) = self.arch.validate() {
            errors.extend(e.into_iter().map(|m| format!("autoencoder.arch: {m}")));
        }
        if self.steps == 0 || self.batch_size == 0 {
            errors.push("autoencoder.steps and autoencoder.batch_size must be positive".into());
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            errors.push("autoencoder.kl_weight must be non-negative".into());
        }
        self.lr.validate("autoencoder.lr", errors);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderReport {
    /// Rows of (step, total, reconstruction, kl).
    pub curve: Vec<[f64; 4]>,
    pub initial_recon: f64,
    pub final_recon: f64,
    /// Mean |D(E(x)) - x| over the held-out try-on images.
    pub heldout_l1: Option<f64>,
}

/// The images the autoencoder has to represent: try-on results, pre-warped
/// composites, flat garments and warped garments.
pub fn training_images(samples: &[SamplePair]) -> Result<Vec<Raster>> {
    let mut out = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        let m_w = apply_flow(&s.m_cp, &s.f_gt)?.threshold(0.5);
        out.push(s.t.clone());
        out.push(Raster::select(&m_w, &s.c_w_gt, &s.p_a)?);
        out.push(s.c.clone());
        out.push(s.c_w_gt.clone());
    }
    Ok(out)
}

pub fn train_autoencoder(
    train: &[SamplePair],
    heldout: &[SamplePair],
    config: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder, AutoencoderReport)> {
    train_on_images(&training_images(train)?, heldout, config, seed)
}

pub fn train_on_images(
    pool: &[Raster],
    heldout: &[SamplePair],
    config: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder, AutoencoderReport)> {
    if pool.is_empty() {
        return Err(Error::Argument("no training images".into()));
    }
    let mut arch = config.arch.clone();
    arch.latent_scale = 1.0;
    let mut ae = Autoencoder::new(arch, seed, DType::F32)?;
    let (enc, dec) = ae.trainable()?;
    let mut trainer = Trainer::new(ae.params.vars(), config.lr, config.steps, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive_seed(seed, &[1]));
    let mut curve = Vec::new();
    let mut initial = None;
    let mut last_recon = f64::NAN;
    let sample_posterior = config.arch.regularized && config.kl_weight > 0.0;
    for step in 0..config.steps {
        let batch: Vec<&Raster> = (0..config.batch_size)
            .map(|_| &pool[rng.random_range(0..pool.len())])
            .collect();
        let x = Raster::batch_to_tensor(&batch, &Device::Cpu, DType::F32)?;
        let out = enc.forward(&x)?;
        let z = match (&out.logvar, sample_posterior) {
            (Some(lv), true) => {
                let eps = randn(&mut rng, out.mean.dims(), DType::F32)?;
                (&out.mean + ((lv * 0.5)?.exp()? * eps)?)?
            }
            _ => out.mean.clone(),
        };
        let recon = (dec.forward(&z)? - &x)?.abs()?.mean_all()?;
        let (loss, kl_value) = match (&out.logvar, config.kl_weight > 0.0) {
            (Some(lv), true) => {
                let kl = (((out.mean.sqr()? + lv.exp()?)? - 1.0)? - lv)?.mean_all()?.affine(0.5, 0.0)?;
                let kv = kl.to_scalar::<f32>()? as f64;
                ((&recon + kl.affine(config.kl_weight, 0.0)?)?, kv)
            }
            _ => (recon.clone(), 0.0),
        };
        let r = recon.to_scalar::<f32>()? as f64;
        let total = trainer.step(&loss, "autoencoder loss")?;
        initial.get_or_insert(r);
        last_recon = r;
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            log::debug!("autoencoder step {step}: recon {r:.5}");
            curve.push([step as f64, total, r, kl_value]);
        }
    }

    // fit the latent scale on a fixed slice of the pool
    let probe: Vec<&Raster> = pool.iter().step_by((pool.len() / 64).max(1)).take(64).collect();
    let z = ae.encode_tensor(&Raster::batch_to_tensor(&probe, &Device::Cpu, DType::F32)?)?;
    let std = z.flatten_all()?.to_vec1::<f32>()?;
    let mean = std.iter().map(|v| *v as f64).sum::<f64>() / std.len() as f64;
    let var = std.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / std.len() as f64;
    let scale = if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
    let mut arch = ae.arch.clone();
    arch.latent_scale = scale;
    let mut meta = ae.meta.clone();
    meta.step = config.steps;
    meta.loss = last_recon;
    meta.trained = true;
    let ae = Autoencoder::from_parts(arch, ae.params, meta)?;

    let heldout_l1 = if heldout.is_empty() {
        None
    } else {
        Some(reconstruction_l1(&ae, heldout.iter().map(|s| &s.t))?)
    };
    let report = AutoencoderReport {
        curve,
        initial_recon: initial.unwrap_or(f64::NAN),
        final_recon: last_recon,
        heldout_l1,
    };
    Ok((ae, report))
}

/// Mean absolute reconstruction error over a set of images.
pub fn reconstruction_l1<'a>(ae: &Autoencoder, images: impl Iterator<Item = &'a Raster>) -> Result<f64> {
    let images: Vec<&Raster> = images.collect();
    let mut total = 0.0;
    for chunk in images.chunks(32) {
        let x = Raster::batch_to_tensor(chunk, &Device::Cpu, DType::F32)?;
        let y = ae.decode_tensor(&ae.encode_tensor(&x)?)?;
        total += (y - &x)?.abs()?.sum_all()?.to_scalar::<f32>()? as f64;
    }
    let n: usize = images.iter().map(|r| r.data.len()).sum();
    Ok(total / n as f64)
}
