use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::{endpoint_error, FlowField};
use super::losses::{flow_loss_components, FlatLossWeights, FlowLossComponents, LossWeights, WarpLossWeights};
use super::net::{default_widths, take_off, FlowModules, FlowNet, FlowNetArch, FlowRole};
use crate::error::{Error, Result};
use crate::evalmetrics::masked_l1;
use crate::image::{Mask, Raster};
use crate::latentspace::{Autoencoder, FeatureExtractor};
use crate::nn::{avg_pool, warp};
use crate::synthgen::SamplePair;
use crate::train::{Ema, LrSchedule, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[serde(bound(deserialize = "W: Default + Deserialize<'de>"))]
pub struct FlowTrainConfig<W> {
    pub widths: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub loss: W,
    /// Weight ratio of the image L1 term between successive coarser pyramid
    /// levels (0 trains on the final flow only).
    pub level_decay: f64,
    /// Mirror half of the flattening examples left to right. Ignored for the
    /// warp role, whose pose channels are sided.
    pub hflip: bool,
    pub log_every: usize,
}

pub type WarpTrainConfig = FlowTrainConfig<WarpLossWeights>;
pub type FlattenTrainConfig = FlowTrainConfig<FlatLossWeights>;

impl<W: Default> Default for FlowTrainConfig<W> {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            steps: 2000,
            batch_size: 8,
            lr: LrSchedule {
                base: 1e-3,
                warmup_steps: 50,
                hold_fraction: 0.3,
                final_fraction: 0.05,
            },
            loss: W::default(),
            level_decay: 0.5,
            hflip: true,
            log_every: 10,
        }
    }
}

impl<W: LossWeights> FlowTrainConfig<W> {
    pub fn validate(&self, field: &str, errors: &mut Vec<String>) {
        if self.steps == 0 || self.batch_size == 0 {
            errors.push(format!("{field}.steps and {field}.batch_size must be positive"));
        }
        if self.widths.len() != super::net::PYRAMID_LEVELS || self.widths.contains(&0) {
            errors.push(format!("{field}.widths must hold 5 positive entries"));
        }
        if !(0.0..=1.0).contains(&self.level_decay) {
            errors.push(format!("{field}.level_decay must lie in [0, 1]"));
        }
        self.loss.validate(&format!("{field}.loss"), errors);
        self.lr.validate(&format!("{field}.lr"), errors);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrainReport {
    /// Rows of (step, total, l1, per, sec, tv, smoothed total).
    pub curve: Vec<[f64; 7]>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl FlowTrainReport {
    pub const HEADER: [&'static str; 7] = ["step", "total", "l1", "per", "sec", "tv", "smoothed"];
}

/// Per-sample tensors a flow network trains on.
struct Example {
    source_image: Raster,
    extra_source: Option<Mask>,
    target_stack: Raster,
    cond: Mask,
    target: Raster,
}

fn example(s: &SamplePair, role: FlowRole) -> Result<Example> {
    let t_c = take_off(&s.t, &s.m_c)?;
    Ok(match role {
        FlowRole::Warp => Example {
            source_image: s.c.clone(),
            extra_source: Some(s.m_cp.clone()),
            target_stack: Raster::stack_channels(&[&s.m, &s.pose_map])?,
            cond: s.m.clone(),
            target: t_c,
        },
        FlowRole::Flatten => Example {
            source_image: t_c,
            extra_source: None,
            target_stack: s.m_cp.clone(),
            cond: s.m_cp.clone(),
            target: s.c.clone(),
        },
    })
}

impl Example {
    fn mirrored(&self) -> Example {
        Example {
            source_image: self.source_image.flipped_horizontal(),
            extra_source: self.extra_source.as_ref().map(Raster::flipped_horizontal),
            target_stack: self.target_stack.flipped_horizontal(),
            cond: self.cond.flipped_horizontal(),
            target: self.target.flipped_horizontal(),
        }
    }
}

struct Batch {
    source_image: Tensor,
    source: Tensor,
    target_stack: Tensor,
    cond: Tensor,
    target: Tensor,
}

fn batch(items: &[&Example], dtype: DType) -> Result<Batch> {
    let dev = Device::Cpu;
    let gather = |f: &dyn Fn(&Example) -> &Raster| -> Result<Tensor> {
        let v: Vec<&Raster> = items.iter().map(|e| f(e)).collect();
        Raster::batch_to_tensor(&v, &dev, dtype)
    };
    let source_image = gather(&|e| &e.source_image)?;
    let source = if items[0].extra_source.is_some() {
        let extra = gather(&|e| e.extra_source.as_ref().expect("uniform roles"))?;
        Tensor::cat(&[&source_image, &extra], 3)?
    } else {
        source_image.clone()
    };
    Ok(Batch {
        source_image,
        source,
        target_stack: gather(&|e| &e.target_stack)?,
        cond: gather(&|e| &e.cond)?,
        target: gather(&|e| &e.target)?,
    })
}

/// Training objective for one batch: the weighted component sum on the final
/// flow plus decaying image L1 terms at the coarser levels.
pub fn flow_objective<W: LossWeights>(
    modules: &FlowModules,
    source: &Tensor,
    source_image: &Tensor,
    target_stack: &Tensor,
    cond: &Tensor,
    target: &Tensor,
    weights: &W,
    level_decay: f64,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<(Tensor, FlowLossComponents<Tensor>)> {
    let out = modules.flows(source, target_stack, cond)?;
    let pred = warp(source_image, out.final_flow())?;
    let comps = flow_loss_components(&pred, target, out.final_flow(), extractor)?;
    let mut total = weights.aggregate_tensor(&comps)?;
    let mut w = 1.0;
    for (i, flow) in out.flows.iter().enumerate().skip(1) {
        w *= level_decay;
        if w == 0.0 {
            break;
        }
        let k = 1 << i;
        let p = warp(&avg_pool(source_image, k)?, flow)?;
        let l = (p - avg_pool(target, k)?)?.abs()?.mean_all()?;
        total = (total + l.affine(w, 0.0)?)?;
    }
    Ok((total, comps))
}

pub fn train_flow_network<W: LossWeights + Clone>(
    samples: &[SamplePair],
    role: FlowRole,
    config: &FlowTrainConfig<W>,
    perceptual: Option<&Autoencoder>,
    seed: u64,
) -> Result<(FlowNet, FlowTrainReport)> {
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    if let Some(ae) = perceptual {
        ae.ensure_trained()?;
    }
    let examples: Vec<Example> = samples.iter().map(|s| example(s, role)).collect::<Result<_>>()?;
    let mirrored: Option<Vec<Example>> = (config.hflip && role == FlowRole::Flatten)
        .then(|| examples.iter().map(Example::mirrored).collect());
    let mut net = FlowNet::new(FlowNetArch::for_role(role, config.widths.clone()), seed, DType::F32)?;
    let modules = net.trainable()?;
    let mut trainer = Trainer::new(net.params.vars(), config.lr, config.steps, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive_seed(seed, &[2]));
    let extractor = perceptual.map(|ae| ae.encoder() as &dyn FeatureExtractor);
    let mut ema = Ema::new(0.95);
    let mut curve = Vec::new();
    let mut initial = None;
    let mut last = f64::NAN;
    let what = format!("{} loss", role.name());
    for step in 0..config.steps {
        let items: Vec<&Example> = (0..config.batch_size)
            .map(|_| {
                let i = rng.random_range(0..examples.len());
                match &mirrored {
                    Some(m) if rng.random::<bool>() => &m[i],
                    _ => &examples[i],
                }
            })
            .collect();
        let b = batch(&items, DType::F32)?;
        let (loss, comps) = flow_objective(
            &modules,
            &b.source,
            &b.source_image,
            &b.target_stack,
            &b.cond,
            &b.target,
            &config.loss,
            config.level_decay,
            extractor,
        )?;
        let v = comps.values()?;
        let total = trainer.step(&loss, &what)?;
        let smoothed = ema.update(total);
        initial.get_or_insert(total);
        last = total;
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            log::debug!("{} step {step}: loss {total:.5} (l1 {:.5})", role.name(), v.l1);
            curve.push([step as f64, total, v.l1, v.per, v.sec, v.tv, smoothed]);
        }
    }
    net.meta.step = config.steps;
    net.meta.loss = last;
    net.meta.trained = true;
    let net = FlowNet::from_parts(net.arch.clone(), net.params, net.meta.clone())?;
    Ok((
        net,
        FlowTrainReport {
            curve,
            initial_loss: initial.unwrap_or(f64::NAN),
            final_loss: last,
        },
    ))
}

/// Held-out quality of a flattening network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlattenEval {
    /// Mean over samples of masked L1(Ĉ, C) on `m_cp`.
    pub flattened_l1: f64,
    /// The same with the taken-off garment left unflattened.
    pub baseline_l1: f64,
    /// Mean endpoint error against the ground-truth inverse flow on `m_cp`.
    pub endpoint_error: f64,
}

pub fn evaluate_flatten(net: &FlowNet, samples: &[SamplePair]) -> Result<FlattenEval> {
    let (mut fl, mut base, mut epe) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(16) {
        let examples: Vec<Example> = chunk.iter().map(|s| example(s, FlowRole::Flatten)).collect::<Result<_>>()?;
        let refs: Vec<&Example> = examples.iter().collect();
        let b = batch(&refs, net.dtype())?;
        let (flow, c_hat) = super::net::flatten_forward_tensors(net.modules(), &b.source_image, &b.cond)?;
        let flows = Raster::unbatch(&flow)?;
        let c_hats = Raster::unbatch(&c_hat)?;
        for ((s, f), ch) in chunk.iter().zip(flows).zip(c_hats) {
            let t_c = take_off(&s.t, &s.m_c)?;
            fl += masked_l1(&ch, &s.c, &s.m_cp)?;
            base += masked_l1(&t_c, &s.c, &s.m_cp)?;
            epe += endpoint_error(&FlowField::from_raster(f)?, &s.f_gt_inv, Some(&s.m_cp))?.mean as f64;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(FlattenEval {
        flattened_l1: fl / n,
        baseline_l1: base / n,
        endpoint_error: epe / n,
    })
}

/// Held-out quality of a warping network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarpEval {
    /// Mean masked L1(C^w, C_w_gt) over the visible garment `m_C`.
    pub warped_l1: f64,
    /// The same for the unwarped flat garment.
    pub baseline_l1: f64,
    pub endpoint_error: f64,
}

pub fn evaluate_warp(net: &FlowNet, samples: &[SamplePair]) -> Result<WarpEval> {
    let (mut wl, mut base, mut epe) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(16) {
        let examples: Vec<Example> = chunk.iter().map(|s| example(s, FlowRole::Warp)).collect::<Result<_>>()?;
        let refs: Vec<&Example> = examples.iter().collect();
        let b = batch(&refs, net.dtype())?;
        let out = net.modules().flows(&b.source, &b.target_stack, &b.cond)?;
        let cw = warp(&b.source_image, out.final_flow())?;
        for ((s, f), c) in chunk.iter().zip(Raster::unbatch(out.final_flow())?).zip(Raster::unbatch(&cw)?) {
            wl += masked_l1(&c, &s.c_w_gt, &s.m_c)?;
            base += masked_l1(&s.c, &s.c_w_gt, &s.m_c)?;
            epe += endpoint_error(&FlowField::from_raster(f)?, &s.f_gt, Some(&s.m_c))?.mean as f64;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(WarpEval {
        warped_l1: wl / n,
        baseline_l1: base / n,
        endpoint_error: epe / n,
    })
}
