use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// Test hook: the same β at every step.
    Constant { beta: f64 },
}

/// Variance schedule with `alpha_bar[0] = 1` and `alpha_bar[t]` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// `beta[t - 1]` is β_t.
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Argument("schedule needs at least one step".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            (0..steps)
                .map(|i| if steps == 1 { lo } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA)).collect()
        }
        ScheduleKind::Constant { beta } => {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::ParameterRange(format!("constant beta {beta} outside (0, 1)")));
            }
            vec![beta; steps]
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule {
        kind,
        steps,
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Argument(format!("time step {t} outside 0..={}", self.steps)))
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::Argument(format!("time step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 - ᾱ_t)·eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    if z0.dims() != eps.dims() {
        return shape_err(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims()));
    }
    let a = schedule.alpha_bar[t];
    Ok((z0.affine(a.sqrt(), 0.0)? + eps.affine((1.0 - a).sqrt(), 0.0)?)?)
}

/// Batched forward process with one time step per leading index.
pub fn forward_diffuse_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() || z0.dim(0)? != ts.len() {
        return shape_err(format!("z0 {:?}, eps {:?}, {} time steps", z0.dims(), eps.dims(), ts.len()));
    }
    let mut sa = Vec::with_capacity(ts.len());
    let mut sb = Vec::with_capacity(ts.len());
    for &t in ts {
        schedule.check_step(t)?;
        sa.push(schedule.alpha_bar[t].sqrt());
        sb.push((1.0 - schedule.alpha_bar[t]).sqrt());
    }
    let mut shape = vec![ts.len()];
    shape.extend(std::iter::repeat_n(1, z0.rank() - 1));
    let col = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?)
    };
    Ok((z0.broadcast_mul(&col(sa)?)? + eps.broadcast_mul(&col(sb)?)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn constant_hook_closed_form() {
        let s = make_schedule(ScheduleKind::Constant { beta: 0.1 }, 3).unwrap();
        assert!((s.alpha_bar[3] - 0.729).abs() < 1e-12);
        assert_eq!(s.alpha_bar[0], 1.0);
    }

    #[test]
    fn linear_endpoints_and_interior() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert_eq!(s.beta[0], 1e-4);
        assert!((s.beta[999] - 0.02).abs() < 1e-15);
        for t in [1usize, 17, 500, 999] {
            let expect = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            assert!((s.beta[t - 1] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(make_schedule(ScheduleKind::Linear, 0).is_err());
        assert!(make_schedule(ScheduleKind::Constant { beta: 1.5 }, 3).is_err());
    }

    #[test]
    fn scalar_substitution() {
        let s = NoiseSchedule {
            kind: ScheduleKind::Linear,
            steps: 1,
            beta: vec![0.75],
            alpha_bar: vec![1.0, 0.25],
        };
        let z0 = Tensor::new(&[2.0f64], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let z = forward_diffuse(&z0, 1, &eps, &s).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((z - 1.8660254037844386).abs() < 1e-12);
        let zero = eps.zeros_like().unwrap();
        let z = forward_diffuse(&z0, 1, &zero, &s).unwrap().to_vec1::<f64>().unwrap()[0];
        assert_eq!(z, 1.0);
        assert!(forward_diffuse(&z0, 2, &eps, &s).is_err());
        assert!(forward_diffuse(&z0, 0, &eps, &s).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let s = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let z0 = Tensor::rand(-1f32, 1.0, (3, 4, 3, 2), &Device::Cpu).unwrap();
        let eps = Tensor::rand(-1f32, 1.0, (3, 4, 3, 2), &Device::Cpu).unwrap();
        let ts = [1, 25, 50];
        let b = forward_diffuse_batch(&z0, &ts, &eps, &s).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let one = forward_diffuse(&z0.get(i).unwrap(), t, &eps.get(i).unwrap(), &s).unwrap();
            let d = (one - b.get(i).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(steps in 1usize..1200, cosine in proptest::bool::ANY) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = make_schedule(kind, steps).unwrap();
            proptest::prop_assert_eq!(s.alpha_bar[0], 1.0);
            for w in s.alpha_bar.windows(2) {
                proptest::prop_assert!(w[1] < w[0]);
            }
            for b in &s.beta {
                proptest::prop_assert!(*b > 0.0 && *b < 1.0);
            }
        }
    }
}
