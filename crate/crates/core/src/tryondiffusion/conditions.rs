//! Everything the frozen networks contribute to a try-on query, computed once
//! per query and shared by training, sampling and evaluation.

use candle_core::{DType, Device, Tensor};

use super::tokens::{backbone_features, TokenArch};
use crate::error::{Error, Result};
use crate::flowwarp::net::warp_forward_tensors;
use crate::flowwarp::FlowNet;
use crate::image::{Mask, Raster};
use crate::latentspace::{downsize_mask_tensor, Autoencoder};
use crate::nn::warp;
use crate::synthgen::SamplePair;

/// A person (agnostic image, region mask, pose) paired with a flat garment.
#[derive(Debug, Clone)]
pub struct TryOnQuery<'a> {
    pub id: String,
    pub p_a: &'a Raster,
    pub m: &'a Mask,
    pub pose_map: &'a Raster,
    pub c: &'a Raster,
    pub m_cp: &'a Mask,
    /// Ground-truth try-on image and its garment mask, when the pair is real.
    pub truth: Option<(&'a Raster, &'a Mask)>,
}

impl<'a> TryOnQuery<'a> {
    pub fn paired(s: &'a SamplePair) -> Self {
        Self {
            id: s.sample_id.clone(),
            p_a: &s.p_a,
            m: &s.m,
            pose_map: &s.pose_map,
            c: &s.c,
            m_cp: &s.m_cp,
            truth: Some((&s.t, &s.m_c)),
        }
    }

    /// Person of `person` wearing the garment of `garment`.
    pub fn unpaired(person: &'a SamplePair, garment: &'a SamplePair) -> Self {
        Self {
            id: format!("{}+{}", person.sample_id, garment.sample_id),
            p_a: &person.p_a,
            m: &person.m,
            pose_map: &person.pose_map,
            c: &garment.c,
            m_cp: &garment.m_cp,
            truth: None,
        }
    }
}

/// Batched frozen-network outputs for a list of queries (leading axis = query).
#[derive(Debug, Clone)]
pub struct Conditions {
    pub ids: Vec<String>,
    /// `E(T)`; present when every query has ground truth.
    pub z0_main: Option<Tensor>,
    /// `E(C^w)`.
    pub z0_prior: Tensor,
    /// `E(T̂^w)`.
    pub local: Tensor,
    pub m_r: Tensor,
    pub token_feats: Tensor,
    pub c: Tensor,
    pub m_cp: Tensor,
    /// Garment mask of the try-on image: ground truth when known, else the
    /// warped garment mask inside the try-on region.
    pub m_c: Tensor,
    pub c_w: Tensor,
    pub prewarped: Tensor,
    pub truth: Option<Tensor>,
}

const CHUNK: usize = 32;

fn stack(items: Vec<&Raster>, dtype: DType) -> Result<Tensor> {
    Raster::batch_to_tensor(&items, &Device::Cpu, dtype)
}

pub fn prepare_conditions(
    queries: &[TryOnQuery],
    ae: &Autoencoder,
    warp_net: &FlowNet,
    tokens: &TokenArch,
) -> Result<Conditions> {
    if queries.is_empty() {
        return Err(Error::Argument("no try-on queries".into()));
    }
    let dt = ae.dtype();
    let all_truth = queries.iter().all(|q| q.truth.is_some());
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); 12];
    for chunk in queries.chunks(CHUNK) {
        let c = stack(chunk.iter().map(|q| q.c).collect(), dt)?;
        let m_cp = stack(chunk.iter().map(|q| q.m_cp).collect(), dt)?;
        let m = stack(chunk.iter().map(|q| q.m).collect(), dt)?;
        let pose = stack(chunk.iter().map(|q| q.pose_map).collect(), dt)?;
        let p_a = stack(chunk.iter().map(|q| q.p_a).collect(), dt)?;
        let (flow, c_w) = warp_forward_tensors(warp_net.modules(), &c, &m_cp, &m, &pose)?;
        let m_w = warp(&m_cp, &flow)?.ge(0.5)?.to_dtype(dt)?;
        let region = (m_w * &m)?;
        let keep = region.affine(-1.0, 1.0)?;
        let prewarped = (c_w.broadcast_mul(&region)? + p_a.broadcast_mul(&keep)?)?;
        let m_c = if all_truth {
            stack(chunk.iter().map(|q| q.truth.expect("checked").1).collect(), dt)?
        } else {
            region.clone()
        };
        if all_truth {
            let t = stack(chunk.iter().map(|q| q.truth.expect("checked").0).collect(), dt)?;
            parts[0].push(ae.encode_tensor(&t)?);
            parts[11].push(t);
        }
        parts[1].push(ae.encode_tensor(&c_w)?);
        parts[2].push(ae.encode_tensor(&prewarped)?);
        parts[3].push(downsize_mask_tensor(&m, ae.arch.downsample)?);
        parts[4].push(backbone_features(ae, tokens, &c)?);
        parts[5].push(c);
        parts[6].push(m_cp);
        parts[7].push(m_c);
        parts[8].push(c_w);
        parts[9].push(prewarped);
    }
    let cat = |v: &Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::cat(v, 0)?.detach()) };
    Ok(Conditions {
        ids: queries.iter().map(|q| q.id.clone()).collect(),
        z0_main: if all_truth { Some(cat(&parts[0])?) } else { None },
        z0_prior: cat(&parts[1])?,
        local: cat(&parts[2])?,
        m_r: cat(&parts[3])?,
        token_feats: cat(&parts[4])?,
        c: cat(&parts[5])?,
        m_cp: cat(&parts[6])?,
        m_c: cat(&parts[7])?,
        c_w: cat(&parts[8])?,
        prewarped: cat(&parts[9])?,
        truth: if all_truth { Some(cat(&parts[11])?) } else { None },
    })
}

impl Conditions {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows `idx` of every tensor.
    pub fn select(&self, idx: &[usize]) -> Result<Conditions> {
        let ix = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.index_select(&ix, 0)?) };
        let opt = |t: &Option<Tensor>| -> Result<Option<Tensor>> { t.as_ref().map(pick).transpose() };
        Ok(Conditions {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            z0_main: opt(&self.z0_main)?,
            z0_prior: pick(&self.z0_prior)?,
            local: pick(&self.local)?,
            m_r: pick(&self.m_r)?,
            token_feats: pick(&self.token_feats)?,
            c: pick(&self.c)?,
            m_cp: pick(&self.m_cp)?,
            m_c: pick(&self.m_c)?,
            c_w: pick(&self.c_w)?,
            prewarped: pick(&self.prewarped)?,
            truth: opt(&self.truth)?,
        })
    }

    /// Contiguous row range.
    pub fn slice(&self, start: usize, len: usize) -> Result<Conditions> {
        self.select(&(start..start + len).collect::<Vec<_>>())
    }
}
