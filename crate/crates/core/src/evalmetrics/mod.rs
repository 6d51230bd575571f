//! SSIM, masked L1, a Fréchet realism proxy on autoencoder features, flat
//! garment consistency, and paired/unpaired evaluation reports.
pub mod frechet;
pub mod ssim;

use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

pub use frechet::frechet_proxy;
pub use ssim::ssim;

use crate::error::{Error, Result};
use crate::flowwarp::{flatten_network_forward, take_off, FlowNet};
use crate::image::{Mask, Raster};
use crate::latentspace::{Autoencoder, FeatureExtractor};

/// Mean |x - y| over the mask support (mask values ≥ 0.5).
pub fn masked_l1(x: &Raster, y: &Raster, mask: &Mask) -> Result<f64> {
    x.ensure_same_grid(y, "masked L1 operands")?;
    if (mask.height, mask.width) != (x.height, x.width) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height, mask.width, x.height, x.width
        )));
    }
    let c = x.channels;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..x.height * x.width {
        if mask.data[i * mask.channels] >= 0.5 {
            for ch in 0..c {
                sum += (x.data[i * c + ch] - y.data[i * c + ch]).abs() as f64;
            }
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::Argument("masked L1 over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// `masked_l1(F(take_off(T̂, m_C)), C, m_cp)`.
pub fn flat_consistency(t_hat: &Raster, m_c: &Mask, flatten: &FlowNet, c: &Raster, m_cp: &Mask) -> Result<f64> {
    let (_, c_hat) = flatten_network_forward(flatten, &take_off(t_hat, m_c)?, m_cp)?;
    masked_l1(&c_hat, c, m_cp)
}

/// Spatially pooled autoencoder features, one vector per image.
pub fn realism_features(ae: &Autoencoder, images: &[&Raster]) -> Result<Vec<Vec<f64>>> {
    ae.ensure_trained()?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = Raster::batch_to_tensor(chunk, &Device::Cpu, ae.dtype())?;
        let feats = ae.encoder().features(&x)?;
        let pooled: Vec<Vec<f32>> = feats
            .iter()
            .map(|f| -> Result<Vec<f32>> {
                let (b, h, w, c) = f.dims4()?;
                Ok(f.reshape((b, h * w, c))?.mean(1)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
            })
            .collect::<Result<_>>()?;
        for i in 0..chunk.len() {
            let mut v = Vec::new();
            for (f, p) in feats.iter().zip(&pooled) {
                let c = f.dims()[3];
                v.extend(p[i * c..(i + 1) * c].iter().map(|x| *x as f64));
            }
            out.push(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Paired,
    Unpaired,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Setting::Paired),
            "unpaired" => Ok(Setting::Unpaired),
            other => Err(Error::Argument(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: String,
    pub ssim: Option<f64>,
    pub masked_l1: Option<f64>,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub mean_ssim: Option<f64>,
    pub mean_masked_l1: Option<f64>,
    pub frechet_proxy: f64,
    pub mean_consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub rows: Vec<EvalRow>,
    pub aggregates: EvalAggregates,
    pub config_fingerprint: String,
    /// Metrics of the usual protocol that this report deliberately lacks.
    pub omitted: Vec<String>,
}

/// One evaluated try-on result.
pub struct Prediction<'a> {
    pub id: String,
    pub image: &'a Raster,
    /// Ground-truth image and its garment mask (paired setting only).
    pub truth: Option<(&'a Raster, &'a Mask)>,
    /// Garment mask used for the take-off before flattening.
    pub m_c: &'a Mask,
    pub c: &'a Raster,
    pub m_cp: &'a Mask,
}

/// Scores predictions; `reference` is the set of real try-on images the
/// Fréchet proxy compares against.
pub fn evaluate_predictions(
    setting: Setting,
    predictions: &[Prediction],
    reference: &[&Raster],
    ae: &Autoencoder,
    flatten: &FlowNet,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if predictions.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let rows: Vec<EvalRow> = predictions
        .par_iter()
        .map(|p| -> Result<EvalRow> {
            let (ssim_v, l1) = match (setting, p.truth) {
                (Setting::Paired, Some((t, m_c))) => (Some(ssim(p.image, t)?), Some(masked_l1(p.image, t, m_c)?)),
                (Setting::Paired, None) => {
                    return Err(Error::Argument(format!("paired row {} lacks ground truth", p.id)))
                }
                (Setting::Unpaired, _) => (None, None),
            };
            Ok(EvalRow {
                sample_id: p.id.clone(),
                ssim: ssim_v,
                masked_l1: l1,
                consistency: flat_consistency(p.image, p.m_c, flatten, p.c, p.m_cp)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean_opt = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let images: Vec<&Raster> = predictions.iter().map(|p| p.image).collect();
    let fid = frechet_proxy(&realism_features(ae, &images)?, &realism_features(ae, reference)?)?;
    Ok(EvalReport {
        setting,
        aggregates: EvalAggregates {
            mean_ssim: mean_opt(&|r| r.ssim),
            mean_masked_l1: mean_opt(&|r| r.masked_l1),
            frechet_proxy: fid,
            mean_consistency: rows.iter().map(|r| r.consistency).sum::<f64>() / n,
        },
        rows,
        config_fingerprint: config_fingerprint.to_string(),
        omitted: vec!["LPIPS".into(), "KID".into()],
    })
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 4] = ["sample_id", "ssim", "masked_l1", "consistency"];

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        crate::io::ensure_dir(dir)?;
        crate::io::write_json(&dir.join(format!("{stem}.json")), self)?;
        let path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(Error::Csv)?;
        w.write_record(Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([r.sample_id.clone(), opt(r.ssim), opt(r.masked_l1), format!("{:.8}", r.consistency)])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_l1_cases() {
        let x = Raster::filled(2, 2, 3, 0.0);
        let m = Raster::filled(2, 2, 1, 1.0);
        assert_eq!(masked_l1(&x, &x, &m).unwrap(), 0.0);
        let y = Raster::filled(2, 2, 3, 0.2);
        assert!((masked_l1(&x, &y, &m).unwrap() - 0.2).abs() < 1e-7);
        let half = Raster::from_fn(2, 2, 1, |_, xx, _| if xx == 0 { 1.0 } else { 0.0 });
        let z = Raster::from_fn(2, 2, 3, |_, xx, _| if xx == 0 { 0.1 } else { 0.3 });
        assert!((masked_l1(&x, &z, &half).unwrap() - 0.1).abs() < 1e-7);
        assert!(masked_l1(&x, &y, &Raster::zeros(2, 2, 1)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn triangle_inequality(v in proptest::collection::vec(0.0f32..1.0, 36), bits in proptest::collection::vec(proptest::bool::ANY, 4)) {
            let x = Raster::from_vec(2, 2, 3, v[..12].to_vec()).unwrap();
            let y = Raster::from_vec(2, 2, 3, v[12..24].to_vec()).unwrap();
            let z = Raster::from_vec(2, 2, 3, v[24..].to_vec()).unwrap();
            let mut m = Raster::from_vec(2, 2, 1, bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()).unwrap();
            m.data[0] = 1.0;
            let lhs = masked_l1(&x, &z, &m).unwrap();
            let rhs = masked_l1(&x, &y, &m).unwrap() + masked_l1(&y, &z, &m).unwrap();
            proptest::prop_assert!(lhs <= rhs + 1e-9);
        }
    }
}
