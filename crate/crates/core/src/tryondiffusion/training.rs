use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conditions::Conditions;
use super::input::{build_denoising_input, Branch};
use super::losses::{consistency_loss, diffusion_loss, tryon_loss, DEFAULT_LAMBDA_CONS};
use super::model::{DiffusionArch, DiffusionModel, DiffusionModules};
use super::schedule::{forward_diffuse_batch, make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::flowwarp::FlowNet;
use crate::latentspace::Autoencoder;
use crate::nn::randn;
use crate::train::{LrSchedule, Trainer};

/// Which parts of the objective are active; the ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub prior_branch: bool,
    pub cons_loss: bool,
    pub global_cond: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            prior_branch: true,
            cons_loss: true,
            global_cond: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub arch: DiffusionArch,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub lambda_cons: f64,
    pub cfg_dropout: f64,
    /// Set from the run-level ablation section rather than stored here.
    #[serde(skip)]
    pub flags: AblationFlags,
    pub log_every: usize,
    /// Window (in steps) of the moving average reported for `L_diff`.
    pub average_window: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            arch: DiffusionArch::default(),
            schedule: ScheduleKind::Linear,
            timesteps: 200,
            steps: 3000,
            batch_size: 8,
            lr: LrSchedule {
                base: 1e-3,
                warmup_steps: 100,
                hold_fraction: 0.3,
                final_fraction: 0.05,
            },
            lambda_cons: DEFAULT_LAMBDA_CONS,
            cfg_dropout: 0.2,
            flags: AblationFlags::default(),
            log_every: 10,
            average_window: 50,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if let Err(Error::Validation(e)) = self.arch.validate() {
            errors.extend(e.into_iter().map(|m| format!("diffusion.arch: {m}")));
        }
        if self.timesteps == 0 {
            errors.push("diffusion.timesteps must be at least 1".into());
        }
        if let ScheduleKind::Constant { beta } = self.schedule {
            if !(beta > 0.0 && beta < 1.0) {
                errors.push("diffusion.schedule beta must lie in (0, 1)".into());
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            errors.push("diffusion.steps and diffusion.batch_size must be positive".into());
        }
        if !(self.lambda_cons > 0.0 && self.lambda_cons.is_finite()) {
            errors.push("diffusion.lambda_cons must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            errors.push("diffusion.cfg_dropout must lie in [0, 1)".into());
        }
        if self.average_window == 0 {
            errors.push("diffusion.average_window must be positive".into());
        }
        self.lr.validate("diffusion.lr", errors);
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule, self.timesteps)
    }
}

/// Parameter hashes of the frozen networks, before and after training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub encoder: (String, String),
    pub decoder: (String, String),
    pub flatten: (String, String),
    pub tokenizer_backbone: (String, String),
}

impl FreezeAudit {
    pub fn passed(&self) -> bool {
        [&self.encoder, &self.decoder, &self.flatten, &self.tokenizer_backbone]
            .iter()
            .all(|(a, b)| a == b)
    }
}

fn frozen_hashes(ae: &Autoencoder, flatten: &FlowNet) -> Result<[String; 3]> {
    Ok([
        ae.params.hash_prefix("encoder.")?,
        ae.params.hash_prefix("decoder.")?,
        flatten.hash()?,
    ])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionReport {
    /// Rows of (step, L_diff, L_cons, L_total).
    pub curve: Vec<[f64; 4]>,
    /// Mean `L_diff` over the first `average_window` steps.
    pub initial_diff_average: f64,
    /// Mean `L_diff` over the last `average_window` steps.
    pub final_diff_average: f64,
    pub freeze_audit: FreezeAudit,
}

impl DiffusionReport {
    pub const HEADER: [&'static str; 4] = ["step", "L_diff", "L_cons", "L_total"];
}

/// One training objective evaluation; returns `(L_total, L_diff, L_cons)`.
#[allow(clippy::too_many_arguments)]
pub fn training_objective(
    modules: &DiffusionModules,
    batch: &Conditions,
    ts: &[usize],
    eps: &Tensor,
    drop: &[bool],
    schedule: &NoiseSchedule,
    config: &DiffusionConfig,
    ae: &Autoencoder,
    flatten: Option<&FlowNet>,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let z0 = batch
        .z0_main
        .as_ref()
        .ok_or_else(|| Error::Argument("training needs ground-truth try-on images".into()))?;
    let zt_main = forward_diffuse_batch(z0, ts, eps, schedule)?;
    let tokens = modules.tokens.forward(&batch.token_feats, drop)?;
    let main = build_denoising_input(&zt_main, &batch.local, &batch.m_r, Branch::Main, ts.to_vec())?;
    let (pred_main, pred_prior) = if config.flags.prior_branch {
        let zt_prior = forward_diffuse_batch(&batch.z0_prior, ts, eps, schedule)?;
        let prior = build_denoising_input(&zt_prior, &batch.local, &batch.m_r, Branch::Prior, ts.to_vec())?;
        // both branches in one pass
        let x = Tensor::cat(&[&main.stacked()?, &prior.stacked()?], 0)?;
        let t2: Vec<usize> = ts.iter().chain(ts.iter()).copied().collect();
        let tok = Tensor::cat(&[&tokens.tokens, &tokens.tokens], 0)?;
        let pred = modules.unet.forward(&x, &t2, &tok, None)?;
        let b = ts.len();
        (pred.narrow(0, 0, b)?, Some(pred.narrow(0, b, b)?))
    } else {
        (modules.predict(&main, &tokens, None)?, None)
    };
    let l_diff = diffusion_loss(&pred_main, pred_prior.as_ref(), z0)?;
    let l_cons = match (config.flags.cons_loss, flatten) {
        (true, Some(f)) => Some(consistency_loss(
            &pred_main,
            ae.decoder(),
            f.modules(),
            &batch.m_c,
            &batch.m_cp,
            &batch.c,
        )?),
        (true, None) => return Err(Error::dependency("flatten checkpoint", "train-flatten")),
        _ => None,
    };
    let total = tryon_loss(&l_diff, l_cons.as_ref(), config.lambda_cons)?;
    Ok((total, l_diff, l_cons))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains the UNet and token projection on prepared conditions; the
/// autoencoder, flattening network and tokenizer backbone stay frozen.
pub fn train_diffusion(
    conditions: &Conditions,
    ae: &Autoencoder,
    flatten: Option<&FlowNet>,
    config: &DiffusionConfig,
    seed: u64,
) -> Result<(DiffusionModel, DiffusionReport)> {
    if conditions.is_empty() {
        return Err(Error::Argument("no training pairs".into()));
    }
    let mut errors = Vec::new();
    config.validate(&mut errors);
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    if config.flags.cons_loss && flatten.is_none() {
        return Err(Error::dependency("flatten checkpoint", "train-flatten"));
    }
    let before = match flatten {
        Some(f) => frozen_hashes(ae, f)?,
        None => [ae.params.hash_prefix("encoder.")?, ae.params.hash_prefix("decoder.")?, String::new()],
    };

    let schedule = config.noise_schedule()?;
    let mut arch = config.arch.clone();
    arch.global_cond = config.flags.global_cond;
    let mut model = DiffusionModel::new(arch, seed, DType::F32)?;
    let modules = model.trainable()?;
    let mut trainer = Trainer::new(model.params.vars(), config.lr, config.steps, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive_seed(seed, &[3]));
    let n = conditions.len();
    let (_, h, w, c) = conditions.z0_prior.dims4()?;
    let mut curve = Vec::new();
    let mut diffs = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=schedule.steps)).collect();
        let drop: Vec<bool> = idx
            .iter()
            .map(|_| !config.flags.global_cond || rng.random::<f64>() < config.cfg_dropout)
            .collect();
        let eps = randn(&mut rng, &[idx.len(), h, w, c], DType::F32)?;
        let batch = conditions.select(&idx)?;
        let (total, l_diff, l_cons) =
            training_objective(&modules, &batch, &ts, &eps, &drop, &schedule, config, ae, flatten)?;
        let d = scalar(&l_diff)?;
        let lc = match &l_cons {
            Some(l) => scalar(l)?,
            None => 0.0,
        };
        let tot = trainer.step(&total, "diffusion loss")?;
        diffs.push(d);
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            log::debug!("diffusion step {step}: L_diff {d:.5} L_cons {lc:.5}");
            curve.push([step as f64, d, lc, tot]);
        }
    }
    let win = config.average_window.min(diffs.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;

    let after = match flatten {
        Some(f) => frozen_hashes(ae, f)?,
        None => [ae.params.hash_prefix("encoder.")?, ae.params.hash_prefix("decoder.")?, String::new()],
    };
    let [e0, d0, f0] = before;
    let [e1, d1, f1] = after;
    let audit = FreezeAudit {
        tokenizer_backbone: (e0.clone(), e1.clone()),
        encoder: (e0, e1),
        decoder: (d0, d1),
        flatten: (f0, f1),
    };
    model.meta.step = config.steps;
    model.meta.loss = *diffs.last().unwrap_or(&f64::NAN);
    model.meta.trained = true;
    let model = DiffusionModel::from_parts(model.arch.clone(), model.params, model.meta.clone())?;
    Ok((
        model,
        DiffusionReport {
            curve,
            initial_diff_average: mean(&diffs[..win]),
            final_diff_average: mean(&diffs[diffs.len() - win..]),
            freeze_audit: audit,
        },
    ))
}
