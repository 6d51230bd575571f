//! Image- and flow-level training losses for the flow networks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::latentspace::FeatureExtractor;

/// The four loss terms, either as graph tensors or as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowLossComponents<T> {
    pub l1: T,
    pub per: T,
    pub sec: T,
    pub tv: T,
}

/// Weights of the perceptual, second-order and total-variation terms
/// relative to the L1 term.
pub trait LossWeights {
    fn per(&self) -> f64;
    fn sec(&self) -> f64;
    fn tv(&self) -> f64;

    fn aggregate(&self, c: &FlowLossComponents<f64>) -> f64 {
        c.l1 + self.per() * c.per + self.sec() * c.sec + self.tv() * c.tv
    }

    fn aggregate_tensor(&self, c: &FlowLossComponents<Tensor>) -> Result<Tensor> {
        let total = (&c.l1 + c.per.affine(self.per(), 0.0)?)?;
        let total = (total + c.sec.affine(self.sec(), 0.0)?)?;
        Ok((total + c.tv.affine(self.tv(), 0.0)?)?)
    }

    fn validate(&self, field: &str, errors: &mut Vec<String>) {
        for (name, v) in [("per", self.per()), ("sec", self.sec()), ("tv", self.tv())] {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{field}.{name} must be positive"));
            }
        }
    }
}

macro_rules! weights {
    ($name:ident, $per:expr, $sec:expr, $tv:expr) => {
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            pub per: f64,
            pub sec: f64,
            pub tv: f64,
        }

        impl Default for $name {
            fn default() -> Self {
                Self {
                    per: $per,
                    sec: $sec,
                    tv: $tv,
                }
            }
        }

        impl LossWeights for $name {
            fn per(&self) -> f64 {
                self.per
            }
            fn sec(&self) -> f64 {
                self.sec
            }
            fn tv(&self) -> f64 {
                self.tv
            }
        }
    };
}

weights!(FlatLossWeights, 0.1, 10.0, 0.01);
weights!(WarpLossWeights, 0.2, 0.01, 6.0);

/// `L_flat` with the default weights.
pub fn aggregate_flat_loss(c: &FlowLossComponents<f64>) -> f64 {
    FlatLossWeights::default().aggregate(c)
}

/// `L_Warp` with the default weights.
pub fn aggregate_warp_loss(c: &FlowLossComponents<f64>) -> f64 {
    WarpLossWeights::default().aggregate(c)
}

fn diff(x: &Tensor, axis: usize) -> Result<Option<Tensor>> {
    let n = x.dim(axis)?;
    if n < 2 {
        return Ok(None);
    }
    Ok(Some((x.narrow(axis, 1, n - 1)? - x.narrow(axis, 0, n - 1)?)?))
}

/// Mean over every axis-wise difference term of one flow component; the
/// per-component means are summed over `(dx, dy)`.
fn stencil_mean(flow: &Tensor, order: usize, square: bool) -> Result<Tensor> {
    let (_, _, _, c) = flow.dims4()?;
    let mut per_channel_sum: Option<Tensor> = None;
    let mut count = 0usize;
    for axis in [1, 2] {
        let mut d = Some(flow.clone());
        for _ in 0..order {
            d = match d {
                Some(t) => diff(&t, axis)?,
                None => None,
            };
        }
        if let Some(d) = d {
            let v = if square { d.sqr()? } else { d.abs()? };
            count += v.elem_count() / c;
            let s = v.sum_all()?;
            per_channel_sum = Some(match per_channel_sum {
                Some(acc) => (acc + s)?,
                None => s,
            });
        }
    }
    match per_channel_sum {
        Some(s) => Ok((s / count as f64)?),
        None => Ok(Tensor::zeros((), flow.dtype(), flow.device())?),
    }
}

/// Mean squared second differences of a `(B, H, W, 2)` flow.
pub fn second_order_smoothness(flow: &Tensor) -> Result<Tensor> {
    stencil_mean(flow, 2, true)
}

/// Mean absolute first differences of a `(B, H, W, 2)` flow.
pub fn total_variation(flow: &Tensor) -> Result<Tensor> {
    stencil_mean(flow, 1, false)
}

/// Mean L1 between extractor features of `pred` and `target`, averaged over levels.
pub fn perceptual_l1(pred: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    let fp = extractor.features(pred)?;
    let ft = extractor.features(&target.detach())?;
    let mut acc: Option<Tensor> = None;
    for (a, b) in fp.iter().zip(ft.iter()) {
        let l = (a - b)?.abs()?.mean_all()?;
        acc = Some(match acc {
            Some(x) => (x + l)?,
            None => l,
        });
    }
    match acc {
        Some(x) => Ok((x / fp.len() as f64)?),
        None => Ok(Tensor::zeros((), pred.dtype(), pred.device())?),
    }
}

/// `(L1, L_per, L_sec, L_TV)` for a predicted image, its target and the flow
/// that produced it. Without an extractor the perceptual term is zero.
pub fn flow_loss_components(
    pred: &Tensor,
    target: &Tensor,
    flow: &Tensor,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<FlowLossComponents<Tensor>> {
    if pred.dims() != target.dims() {
        return shape_err(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    if flow.rank() != 4 || flow.dim(3)? != 2 {
        return shape_err(format!("flow must be (B, H, W, 2), got {:?}", flow.dims()));
    }
    let l1 = (pred - target)?.abs()?.mean_all()?;
    let per = match extractor {
        Some(e) => perceptual_l1(pred, target, e)?,
        None => Tensor::zeros((), pred.dtype(), pred.device())?,
    };
    Ok(FlowLossComponents {
        l1,
        per,
        sec: second_order_smoothness(flow)?,
        tv: total_variation(flow)?,
    })
}

impl FlowLossComponents<Tensor> {
    pub fn values(&self) -> Result<FlowLossComponents<f64>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok(FlowLossComponents {
            l1: v(&self.l1)?,
            per: v(&self.per)?,
            sec: v(&self.sec)?,
            tv: v(&self.tv)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn flow_from(h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Tensor {
        let mut v = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (a, b) = f(y, x);
                v.push(a);
                v.push(b);
            }
        }
        Tensor::from_vec(v, (1, h, w, 2), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn aggregates() {
        let ones = FlowLossComponents { l1: 1.0, per: 1.0, sec: 1.0, tv: 1.0 };
        assert!((aggregate_flat_loss(&ones) - 11.11).abs() < 1e-12);
        assert!((aggregate_warp_loss(&ones) - 7.21).abs() < 1e-12);
        let zero = FlowLossComponents { l1: 0.0, per: 0.0, sec: 0.0, tv: 0.0 };
        assert_eq!(aggregate_flat_loss(&zero), 0.0);
        assert_eq!(aggregate_warp_loss(&zero), 0.0);
        let a = FlowLossComponents { l1: 0.5, per: 0.2, sec: 0.01, tv: 2.0 };
        assert!((aggregate_flat_loss(&a) - 0.64).abs() < 1e-12);
        let b = FlowLossComponents { l1: 0.3, per: 0.5, sec: 2.0, tv: 0.01 };
        assert!((aggregate_warp_loss(&b) - 0.48).abs() < 1e-12);
    }

    #[test]
    fn unit_step_on_a_row() {
        let f = flow_from(1, 4, |_, x| (if x >= 2 { 1.0 } else { 0.0 }, 0.0));
        assert!((scalar(&total_variation(&f).unwrap()) - 1.0 / 3.0).abs() < 1e-15);
        assert!((scalar(&second_order_smoothness(&f).unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_images_and_zero_flow_give_zero() {
        let img = Tensor::rand(0f64, 1.0, (1, 8, 6, 3), &Device::Cpu).unwrap();
        let flow = Tensor::zeros((1, 8, 6, 2), DType::F64, &Device::Cpu).unwrap();
        let c = flow_loss_components(&img, &img, &flow, None).unwrap().values().unwrap();
        assert_eq!((c.l1, c.per, c.sec, c.tv), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = Tensor::zeros((1, 8, 6, 3), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 8, 4, 3), DType::F32, &Device::Cpu).unwrap();
        let f = Tensor::zeros((1, 8, 6, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(flow_loss_components(&a, &b, &f, None).is_err());
    }

    proptest::proptest! {
        #[test]
        fn affine_flows_have_no_curvature(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
                                          d in -3.0f64..3.0, e in -3.0f64..3.0, g in -3.0f64..3.0) {
            let f = flow_from(7, 5, |y, x| (a * x as f64 + b * y as f64 + c, d * x as f64 + e * y as f64 + g));
            proptest::prop_assert!(scalar(&second_order_smoothness(&f).unwrap()) <= 1e-10);
        }

        #[test]
        fn constant_flows_have_no_variation(dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
            let f = flow_from(6, 4, |_, _| (dx, dy));
            proptest::prop_assert_eq!(scalar(&total_variation(&f).unwrap()), 0.0);
        }
    }
}
