//! Bits shared by every training loop: learning-rate schedules, optimiser
//! setup, divergence checks and loss curves.

use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up, a constant plateau, then linear decay to `final_fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    /// Fraction of the run (after warm-up) held at `base` before decaying.
    pub hold_fraction: f64,
    pub final_fraction: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            warmup_steps: 0,
            hold_fraction: 1.0,
            final_fraction: 1.0,
        }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let total = total.max(1) as f64;
        let hold_end = self.hold_fraction * total;
        let s = step as f64;
        if s <= hold_end || total <= hold_end {
            return self.base;
        }
        let frac = ((s - hold_end) / (total - hold_end)).clamp(0.0, 1.0);
        self.base * (1.0 - frac * (1.0 - self.final_fraction))
    }

    pub fn validate(&self, field: &str, errors: &mut Vec<String>) {
        if !(self.base > 0.0 && self.base.is_finite()) {
            errors.push(format!("{field}.base must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hold_fraction) {
            errors.push(format!("{field}.hold_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.final_fraction) {
            errors.push(format!("{field}.final_fraction must lie in [0, 1]"));
        }
    }
}

pub struct Trainer {
    opt: AdamW,
    schedule: LrSchedule,
    total: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, schedule: LrSchedule, total: usize, weight_decay: f64) -> Result<Self> {
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: schedule.at(0, total),
                weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            opt,
            schedule,
            total,
            step: 0,
        })
    }

    /// One optimiser update; refuses non-finite losses.
    pub fn step(&mut self, loss: &Tensor, what: &str) -> Result<f64> {
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        check_finite(value, self.step, what)?;
        self.opt.set_learning_rate(self.schedule.at(self.step, self.total));
        self.opt.backward_step(loss)?;
        self.step += 1;
        Ok(value)
    }
}

pub fn check_finite(value: f64, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            what: what.to_string(),
        })
    }
}

/// Exponential moving average used for logging and overfit checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ema {
    value: Option<f64>,
    decay: f64,
}

impl Ema {
    pub fn new(decay: f64) -> Self {
        Self { value: None, decay }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(v) => self.decay * v + (1.0 - self.decay) * x,
        };
        self.value = Some(v);
        v
    }

    pub fn get(&self) -> Option<f64> {
        self.value
    }
}

/// Writes a loss curve with a header row and one row per logged step.
pub fn write_curve(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        crate::io::ensure_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().enumerate().map(|(i, v)| {
            if i == 0 {
                format!("{}", *v as u64)
            } else {
                format!("{v:.8}")
            }
        }))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
