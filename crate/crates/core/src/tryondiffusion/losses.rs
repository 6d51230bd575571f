use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::flowwarp::net::{flatten_forward_tensors, FlowModules};
use crate::latentspace::Decoder;

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return shape_err(format!("prediction {:?} vs target {:?}", a.dims(), b.dims()));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean-squared x0 loss, averaged over the main and (when trained) prior
/// branch; both branches target the main starting latent.
pub fn diffusion_loss(pred_main: &Tensor, pred_prior: Option<&Tensor>, z0_main: &Tensor) -> Result<Tensor> {
    let main = mse(pred_main, z0_main)?;
    match pred_prior {
        Some(p) => Ok(((main + mse(p, z0_main)?)? * 0.5)?),
        None => Ok(main),
    }
}

/// Masked mean |a - b| over the support of a `(B, H, W, 1)` mask.
pub fn masked_l1_tensor(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return shape_err(format!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    let c = a.dim(3)? as f64;
    let num = (a - b)?.abs()?.broadcast_mul(mask)?.sum_all()?;
    let den = (mask.sum_all()?.affine(c, 0.0)? + 1e-8)?;
    Ok(num.div(&den)?)
}

/// `|F(take_off(D(ẑ0), m_C)) - C|` averaged over the flat-garment mask.
/// The decoder and flattening network are used through frozen views, so
/// only `pred_z0` receives gradients.
pub fn consistency_loss(
    pred_z0: &Tensor,
    decoder: &Decoder,
    flatten: &FlowModules,
    m_c: &Tensor,
    m_cp: &Tensor,
    c: &Tensor,
) -> Result<Tensor> {
    let image = decoder.forward(pred_z0)?;
    flat_consistency_tensor(&image, flatten, m_c, m_cp, c)
}

/// Consistency of an already decoded try-on image.
pub fn flat_consistency_tensor(
    image: &Tensor,
    flatten: &FlowModules,
    m_c: &Tensor,
    m_cp: &Tensor,
    c: &Tensor,
) -> Result<Tensor> {
    let t_c = image.broadcast_mul(m_c)?;
    let (_, c_hat) = flatten_forward_tensors(flatten, &t_c, m_cp)?;
    masked_l1_tensor(&c_hat, c, m_cp)
}

pub const DEFAULT_LAMBDA_CONS: f64 = 0.15;

/// `L_diff + λ_cons · L_cons`.
pub fn tryon_loss(l_diff: &Tensor, l_cons: Option<&Tensor>, lambda_cons: f64) -> Result<Tensor> {
    match l_cons {
        Some(l) if lambda_cons != 0.0 => Ok((l_diff + l.affine(lambda_cons, 0.0)?)?),
        _ => Ok(l_diff.clone()),
    }
}

/// Scalar form of [`tryon_loss`].
pub fn tryon_loss_value(l_diff: f64, l_cons: f64, lambda_cons: f64) -> f64 {
    l_diff + lambda_cons * l_cons
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn s(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn oracle_and_offset() {
        let z = Tensor::randn(0f64, 1.0, (2, 4, 3, 4), &Device::Cpu).unwrap();
        assert_eq!(s(&diffusion_loss(&z, Some(&z), &z).unwrap()), 0.0);
        let off = (&z + 1.0).unwrap();
        assert!((s(&diffusion_loss(&z, Some(&off), &z).unwrap()) - 0.5).abs() < 1e-12);
        // swapping branches leaves the value unchanged
        let a = diffusion_loss(&off, Some(&z), &z).unwrap();
        assert_eq!(s(&a), s(&diffusion_loss(&z, Some(&off), &z).unwrap()));
    }

    #[test]
    fn matches_sum_of_squares() {
        let a = Tensor::randn(0f64, 1.0, (1, 2, 3, 2), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 1.0, (1, 2, 3, 2), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f64, 1.0, (1, 2, 3, 2), &Device::Cpu).unwrap();
        let (va, vb, vz) = (
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            z.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        );
        let mut sa = 0.0;
        let mut sb = 0.0;
        for i in 0..vz.len() {
            sa += (va[i] - vz[i]) * (va[i] - vz[i]);
            sb += (vb[i] - vz[i]) * (vb[i] - vz[i]);
        }
        let expect = 0.5 * (sa / vz.len() as f64 + sb / vz.len() as f64);
        assert!((s(&diffusion_loss(&a, Some(&b), &z).unwrap()) - expect).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum() {
        assert!((tryon_loss_value(0.5, 0.2, DEFAULT_LAMBDA_CONS) - 0.53).abs() < 1e-12);
        assert_eq!(tryon_loss_value(0.0, 0.0, DEFAULT_LAMBDA_CONS), 0.0);
        let d = Tensor::new(0.5f64, &Device::Cpu).unwrap();
        let c = Tensor::new(0.2f64, &Device::Cpu).unwrap();
        assert!((s(&tryon_loss(&d, Some(&c), 0.15).unwrap()) - 0.53).abs() < 1e-12);
        assert_eq!(s(&tryon_loss(&d, Some(&c), 0.0).unwrap()), 0.5);
    }

    #[test]
    fn masked_l1_ignores_outside() {
        let a = Tensor::zeros((1, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::from_vec(
            vec![0.1f64, 0.1, 0.1, 0.1, 0.1, 0.1, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3],
            (1, 2, 2, 3),
            &Device::Cpu,
        )
        .unwrap();
        let m = Tensor::from_vec(vec![1.0f64, 1.0, 0.0, 0.0], (1, 2, 2, 1), &Device::Cpu).unwrap();
        assert!((s(&masked_l1_tensor(&a, &b, &m).unwrap()) - 0.1).abs() < 1e-9);
    }
}
