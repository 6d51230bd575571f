//! Feature-pyramid encoders and the coarse-to-fine flow cascade shared by
//! the warping and flattening networks.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::field::FlowField;
use crate::error::{shape_err, Error, Result};
use crate::image::{Mask, Raster};
use crate::nn::{
    avg_pool, relu, upsample_bilinear2x, upsample_nearest2x, warp, Builder, Checkpoint, CheckpointMeta, Conv2d,
    ParamStore,
};

pub const PYRAMID_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowRole {
    /// Flat garment onto the person: source `[C, m_cp]`, target `[m, pose]`.
    Warp,
    /// Worn garment back to flat: source `T^C`, target `[m_cp]`.
    Flatten,
}

impl FlowRole {
    pub fn name(self) -> &'static str {
        match self {
            FlowRole::Warp => "warp",
            FlowRole::Flatten => "flatten",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            FlowRole::Warp => "train-warp",
            FlowRole::Flatten => "train-flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowNetArch {
    pub role: FlowRole,
    pub source_channels: usize,
    pub target_channels: usize,
    /// Feature channels per pyramid level, finest first.
    pub widths: Vec<usize>,
}

impl FlowNetArch {
    pub fn for_role(role: FlowRole, widths: Vec<usize>) -> Self {
        let (source_channels, target_channels) = match role {
            FlowRole::Warp => (4, 1 + crate::synthgen::person::POSE_CHANNELS),
            FlowRole::Flatten => (3, 1),
        };
        Self {
            role,
            source_channels,
            target_channels,
            widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != PYRAMID_LEVELS || self.widths.contains(&0) {
            return Err(Error::Validation(vec![format!(
                "flow net needs {PYRAMID_LEVELS} positive level widths, got {:?}",
                self.widths
            )]));
        }
        Ok(())
    }
}

pub fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 32, 32]
}

/// Features at five scales, finest first; level `i` has resolution `canvas / 2^i`.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn resolutions(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|t| {
                let (_, h, w, _) = t.dims4()?;
                Ok((h, w))
            })
            .collect()
    }

    pub fn channels(&self) -> Result<Vec<usize>> {
        self.levels.iter().map(|t| Ok(t.dim(3)?)).collect()
    }
}

/// Bottom-up strided convs, top-down nearest upsampling with 1×1 lateral and
/// projection convs.
pub struct Fpn {
    in_channels: usize,
    down: Vec<Conv2d>,
    lateral: Vec<Conv2d>,
    project: Vec<Conv2d>,
}

impl Fpn {
    pub fn build(b: &mut Builder, name: &str, in_channels: usize, widths: &[usize]) -> Result<Self> {
        let mut b = b.push(name);
        let mut down = Vec::new();
        let mut lateral = Vec::new();
        let mut project = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            down.push(Conv2d::new(&mut b, &format!("down{i}"), cin, w, 3, stride)?);
            lateral.push(Conv2d::new(&mut b, &format!("lateral{i}"), w, w, 1, 1)?);
            if i + 1 < widths.len() {
                project.push(Conv2d::new(&mut b, &format!("project{i}"), widths[i + 1], w, 1, 1)?);
            }
            cin = w;
        }
        Ok(Self {
            in_channels,
            down,
            lateral,
            project,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<PyramidFeatures> {
        let (_, h, w, c) = x.dims4()?;
        if c != self.in_channels {
            return shape_err(format!("pyramid expects {} input channels, got {c}", self.in_channels));
        }
        let d = 1 << (PYRAMID_LEVELS - 1);
        if h % d != 0 || w % d != 0 {
            return shape_err(format!("{h}x{w} input not divisible by {d}"));
        }
        let mut bottom_up = Vec::new();
        let mut cur = x.clone();
        for conv in &self.down {
            cur = relu(&conv.forward(&cur)?)?;
            bottom_up.push(cur.clone());
        }
        let n = bottom_up.len();
        let mut levels = vec![None; n];
        let mut top = self.lateral[n - 1].forward(&bottom_up[n - 1])?;
        levels[n - 1] = Some(top.clone());
        for i in (0..n - 1).rev() {
            let td = self.project[i].forward(&upsample_nearest2x(&top)?)?;
            top = (self.lateral[i].forward(&bottom_up[i])? + td)?;
            levels[i] = Some(top.clone());
        }
        Ok(PyramidFeatures {
            levels: levels.into_iter().map(|l| l.expect("filled")).collect(),
        })
    }
}

/// One residual flow head per level.
pub struct Cascade {
    heads: Vec<(Conv2d, Conv2d)>,
}

/// Flows at every level (finest first) and the final full-resolution flow.
pub struct CascadeOutput {
    pub flows: Vec<Tensor>,
}

impl CascadeOutput {
    pub fn final_flow(&self) -> &Tensor {
        &self.flows[0]
    }
}

impl Cascade {
    pub fn build(b: &mut Builder, widths: &[usize]) -> Result<Self> {
        let mut b = b.push("cascade");
        let heads = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let hidden = Conv2d::new(&mut b, &format!("hidden{i}"), 2 * w + 1, w, 3, 1)?;
                let out = Conv2d::zeroed(&mut b, &format!("flow{i}"), w, 2, 3)?;
                Ok((hidden, out))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    /// Coarse to fine: the flow from level `i + 1` is upsampled, doubled, and
    /// composed with the residual predicted at level `i` from the source
    /// features warped so far, the target features and the level's mask.
    pub fn estimate(
        &self,
        source: &PyramidFeatures,
        target: &PyramidFeatures,
        masks: &[Tensor],
    ) -> Result<CascadeOutput> {
        let n = self.heads.len();
        if source.levels.len() != n || target.levels.len() != n {
            return shape_err(format!(
                "cascade needs {n} levels, got {} source and {} target",
                source.levels.len(),
                target.levels.len()
            ));
        }
        if masks.len() != n {
            return Err(Error::Argument(format!("condition masks for {} of {n} levels", masks.len())));
        }
        let mut flows = vec![None; n];
        let mut flow: Option<Tensor> = None;
        for i in (0..n).rev() {
            let src = &source.levels[i];
            let (b, h, w, _) = src.dims4()?;
            if masks[i].dims() != [b, h, w, 1] {
                return shape_err(format!("level {i} mask {:?} vs features {b}x{h}x{w}", masks[i].dims()));
            }
            let up = match &flow {
                Some(f) => Some((upsample_bilinear2x(f)? * 2.0)?),
                None => None,
            };
            let warped = match &up {
                Some(f) => warp(src, f)?,
                None => src.clone(),
            };
            let x = Tensor::cat(&[&warped, &target.levels[i], &masks[i]], 3)?;
            let (hidden, out) = &self.heads[i];
            let residual = out.forward(&relu(&hidden.forward(&x)?)?)?;
            let next = match up {
                Some(f) => compose_flow_tensors(&f, &residual)?,
                None => residual,
            };
            flows[i] = Some(next.clone());
            flow = Some(next);
        }
        Ok(CascadeOutput {
            flows: flows.into_iter().map(|f| f.expect("filled")).collect(),
        })
    }
}

/// `(f ⊕ g)(x) = g(x) + f(x + g(x))` on `(B, H, W, 2)` tensors.
pub fn compose_flow_tensors(f: &Tensor, g: &Tensor) -> Result<Tensor> {
    Ok((g + warp(f, g)?)?)
}

/// Average-pooled copies of a `(B, H, W, 1)` mask at every pyramid level.
pub fn mask_pyramid(mask: &Tensor) -> Result<Vec<Tensor>> {
    let mut out = vec![mask.clone()];
    for i in 1..PYRAMID_LEVELS {
        out.push(avg_pool(mask, 1 << i)?);
    }
    Ok(out)
}

/// The trainable pieces of a flow network.
pub struct FlowModules {
    pub source_fpn: Fpn,
    pub target_fpn: Fpn,
    pub cascade: Cascade,
}

impl FlowModules {
    pub fn build(b: &mut Builder, arch: &FlowNetArch) -> Result<Self> {
        Ok(Self {
            source_fpn: Fpn::build(b, "source_fpn", arch.source_channels, &arch.widths)?,
            target_fpn: Fpn::build(b, "target_fpn", arch.target_channels, &arch.widths)?,
            cascade: Cascade::build(b, &arch.widths)?,
        })
    }

    /// Flow pyramid for a batch; `cond` is the full-resolution condition mask.
    pub fn flows(&self, source: &Tensor, target: &Tensor, cond: &Tensor) -> Result<CascadeOutput> {
        let s = self.source_fpn.encode(source)?;
        let t = self.target_fpn.encode(target)?;
        self.cascade.estimate(&s, &t, &mask_pyramid(cond)?)
    }
}

/// A flow network with its parameters; `modules` are frozen views.
pub struct FlowNet {
    pub arch: FlowNetArch,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
    modules: FlowModules,
}

impl FlowNet {
    pub fn new(arch: FlowNetArch, seed: u64, dtype: DType) -> Result<Self> {
        let meta = CheckpointMeta {
            role: arch.role.name().into(),
            seed,
            step: 0,
            loss: f64::NAN,
            trained: false,
            config_fingerprint: String::new(),
        };
        Self::from_parts(arch, ParamStore::new(seed, dtype), meta)
    }

    pub fn from_parts(arch: FlowNetArch, mut params: ParamStore, meta: CheckpointMeta) -> Result<Self> {
        arch.validate()?;
        let modules = FlowModules::build(&mut Builder::new(&mut params, true), &arch)?;
        Ok(Self {
            arch,
            params,
            meta,
            modules,
        })
    }

    pub fn trainable(&mut self) -> Result<FlowModules> {
        FlowModules::build(&mut Builder::new(&mut self.params, false), &self.arch)
    }

    pub fn modules(&self) -> &FlowModules {
        &self.modules
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::from_parts(self.arch.clone(), self.params.to_dtype(dtype)?, self.meta.clone())
    }

    pub fn load(dir: &Path, role: FlowRole) -> Result<Self> {
        if !crate::nn::checkpoint_exists(dir) {
            return Err(Error::dependency(
                format!("{} checkpoint at {}", role.name(), dir.display()),
                role.command(),
            ));
        }
        let ck: Checkpoint<FlowNetArch> = Checkpoint::load(dir, DType::F32)?;
        if ck.arch.role != role {
            return Err(Error::Argument(format!(
                "checkpoint at {} is a {} network, expected {}",
                dir.display(),
                ck.arch.role.name(),
                role.name()
            )));
        }
        Self::from_parts(ck.arch, ck.params, ck.meta)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Checkpoint {
            arch: self.arch.clone(),
            meta: self.meta.clone(),
            params: self.params.to_dtype(DType::F32)?,
        }
        .save(dir)
    }

    pub fn hash(&self) -> Result<String> {
        self.params.hash()
    }

    fn ensure_role(&self, role: FlowRole) -> Result<()> {
        if self.arch.role != role {
            return Err(Error::Argument(format!(
                "{} network used as {}",
                self.arch.role.name(),
                role.name()
            )));
        }
        Ok(())
    }
}

/// Batched warp-network pass: returns `(F̂, C^w)`.
pub fn warp_forward_tensors(
    modules: &FlowModules,
    c: &Tensor,
    m_cp: &Tensor,
    m: &Tensor,
    pose: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let source = Tensor::cat(&[c, m_cp], 3)?;
    let target = Tensor::cat(&[m, pose], 3)?;
    let out = modules.flows(&source, &target, m)?;
    let flow = out.final_flow().clone();
    let cw = warp(c, &flow)?;
    Ok((flow, cw))
}

/// Batched flatten-network pass: returns `(flattening flow, Ĉ)`.
pub fn flatten_forward_tensors(modules: &FlowModules, t_c: &Tensor, m_cp: &Tensor) -> Result<(Tensor, Tensor)> {
    let out = modules.flows(t_c, m_cp, m_cp)?;
    let flow = out.final_flow().clone();
    let c_hat = warp(t_c, &flow)?;
    Ok((flow, c_hat))
}

/// Output of the warping network for one pair.
#[derive(Debug, Clone)]
pub struct WarpOutput {
    pub flow: FlowField,
    pub c_w: Raster,
    /// Warped garment mask, thresholded at 0.5.
    pub m_w: Mask,
}

fn tensor_of(r: &Raster, dtype: DType) -> Result<Tensor> {
    r.to_tensor(&Device::Cpu, dtype)
}

/// Warps the flat garment onto the person described by the agnostic-region
/// mask and pose map.
pub fn warp_network_forward(
    net: &FlowNet,
    m: &Mask,
    pose_map: &Raster,
    c: &Raster,
    m_cp: &Mask,
) -> Result<WarpOutput> {
    net.ensure_role(FlowRole::Warp)?;
    for (r, what) in [(m, "m"), (pose_map, "pose map"), (m_cp, "m_cp")] {
        if (r.height, r.width) != (c.height, c.width) {
            return shape_err(format!("{what} is {}x{}, garment {}x{}", r.height, r.width, c.height, c.width));
        }
    }
    let dt = net.dtype();
    let (flow, cw) = warp_forward_tensors(
        net.modules(),
        &tensor_of(c, dt)?,
        &tensor_of(m_cp, dt)?,
        &tensor_of(m, dt)?,
        &tensor_of(pose_map, dt)?,
    )?;
    let flow = FlowField::from_raster(Raster::from_tensor(&flow)?)?;
    let m_w = super::field::apply_flow(m_cp, &flow)?.threshold(0.5);
    Ok(WarpOutput {
        c_w: Raster::from_tensor(&cw)?,
        flow,
        m_w,
    })
}

/// Flattens a taken-off garment back to the flat frame marked by `m_cp`.
pub fn flatten_network_forward(net: &FlowNet, t_c: &Raster, m_cp: &Mask) -> Result<(FlowField, Raster)> {
    net.ensure_role(FlowRole::Flatten)?;
    t_c.ensure_same_grid(&Raster::zeros(m_cp.height, m_cp.width, 3), "T^C vs m_cp")?;
    let dt = net.dtype();
    let (flow, c_hat) = flatten_forward_tensors(net.modules(), &tensor_of(t_c, dt)?, &tensor_of(m_cp, dt)?)?;
    Ok((FlowField::from_raster(Raster::from_tensor(&flow)?)?, Raster::from_tensor(&c_hat)?))
}

/// Keeps only the garment pixels of a try-on image: `T^C = T ⊙ m_C`.
pub fn take_off(try_on: &Raster, m_c: &Mask) -> Result<Raster> {
    try_on.masked(m_c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(role: FlowRole, seed: u64) -> FlowNet {
        FlowNet::new(FlowNetArch::for_role(role, default_widths()), seed, DType::F32).unwrap()
    }

    fn garment() -> (Raster, Mask) {
        let m = Raster::mask_from_fn(64, 48, |y, x| (10..50).contains(&y) && (8..40).contains(&x));
        let c = Raster::from_fn(64, 48, 3, |y, x, ch| if m.get(y, x, 0) > 0.0 { ((x + y + ch) % 5) as f32 / 5.0 } else { 0.0 });
        (c, m)
    }

    #[test]
    fn pyramid_resolutions() {
        let n = net(FlowRole::Flatten, 0);
        let x = Tensor::rand(0f32, 1.0, (2, 64, 48, 3), &Device::Cpu).unwrap();
        let p = n.modules().source_fpn.encode(&x).unwrap();
        assert_eq!(p.resolutions().unwrap(), vec![(64, 48), (32, 24), (16, 12), (8, 6), (4, 3)]);
        assert_eq!(p.channels().unwrap(), default_widths());
        let again = n.modules().source_fpn.encode(&x).unwrap();
        for (a, b) in p.levels.iter().zip(&again.levels) {
            assert_eq!(
                a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
        let bad = Tensor::zeros((1, 64, 48, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(n.modules().source_fpn.encode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let n = net(FlowRole::Flatten, 0);
        for (_, v) in n.params.named() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::rand(0f32, 1.0, (1, 64, 48, 3), &Device::Cpu).unwrap();
        for l in n.modules().source_fpn.encode(&x).unwrap().levels {
            assert_eq!(l.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn untrained_networks_are_the_identity_warp() {
        let (c, m_cp) = garment();
        let w = net(FlowRole::Warp, 1);
        let pose = Raster::zeros(64, 48, 8);
        let out = warp_network_forward(&w, &m_cp, &pose, &c, &m_cp).unwrap();
        assert_eq!(out.c_w, c);
        assert_eq!(out.m_w, m_cp);
        assert!(out.flow.data.iter().all(|&v| v == 0.0));
        let f = net(FlowRole::Flatten, 2);
        let (flow, c_hat) = flatten_network_forward(&f, &c, &m_cp).unwrap();
        assert_eq!(c_hat, c);
        assert_eq!(flow.max_magnitude(), 0.0);
    }

    #[test]
    fn coarse_constant_flow_scales_with_resolution() {
        let n = net(FlowRole::Flatten, 3);
        // make the coarsest head emit (1, 0) everywhere via its bias
        let bias = n.params.var("cascade.flow4.bias").unwrap();
        bias.set(&Tensor::new(&[1f32, 0.0], &Device::Cpu).unwrap()).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 64, 48, 3), &Device::Cpu).unwrap();
        let m = Tensor::ones((1, 64, 48, 1), DType::F32, &Device::Cpu).unwrap();
        let out = n.modules().flows(&x, &m, &m).unwrap();
        let f = Raster::from_tensor(out.final_flow()).unwrap();
        for px in f.data.chunks_exact(2) {
            assert!((px[0] - 16.0).abs() < 1e-5 && px[1].abs() < 1e-5, "{px:?}");
        }
        // level i carries 2^(4-i)
        for (i, fl) in out.flows.iter().enumerate() {
            let v = Raster::from_tensor(fl).unwrap();
            assert!((v.data[0] - (1 << (4 - i)) as f32).abs() < 1e-5);
        }
    }

    #[test]
    fn missing_level_mask_is_an_argument_error() {
        let n = net(FlowRole::Flatten, 0);
        let x = Tensor::rand(0f32, 1.0, (1, 64, 48, 3), &Device::Cpu).unwrap();
        let m = Tensor::ones((1, 64, 48, 1), DType::F32, &Device::Cpu).unwrap();
        let s = n.modules().source_fpn.encode(&x).unwrap();
        let t = n.modules().target_fpn.encode(&m).unwrap();
        let masks = mask_pyramid(&m).unwrap();
        assert!(matches!(n.modules().cascade.estimate(&s, &t, &masks[..4]), Err(Error::Argument(_))));
    }

    #[test]
    fn role_and_shape_checks() {
        let (c, m_cp) = garment();
        let f = net(FlowRole::Flatten, 0);
        assert!(warp_network_forward(&f, &m_cp, &Raster::zeros(64, 48, 8), &c, &m_cp).is_err());
        let w = net(FlowRole::Warp, 0);
        let small = Raster::zeros(32, 48, 1);
        assert!(matches!(
            warp_network_forward(&w, &small, &Raster::zeros(64, 48, 8), &c, &m_cp),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn take_off_masks() {
        let img = Raster::from_fn(4, 4, 3, |y, x, c| (y * 4 + x + c) as f32);
        assert_eq!(take_off(&img, &Raster::filled(4, 4, 1, 1.0)).unwrap(), img);
        assert_eq!(take_off(&img, &Raster::zeros(4, 4, 1)).unwrap(), Raster::zeros(4, 4, 3));
        let half = Raster::mask_from_fn(4, 4, |_, x| x < 2);
        let t = take_off(&img, &half).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..3 {
                    let want = if x < 2 { img.get(y, x, ch) } else { 0.0 };
                    assert_eq!(t.get(y, x, ch), want);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let n = net(FlowRole::Warp, 9);
        n.save(dir.path()).unwrap();
        let back = FlowNet::load(dir.path(), FlowRole::Warp).unwrap();
        assert_eq!(back.hash().unwrap(), n.hash().unwrap());
        assert!(matches!(FlowNet::load(dir.path(), FlowRole::Flatten), Err(Error::Argument(_))));
        let empty = tempfile::tempdir().unwrap();
        match FlowNet::load(empty.path(), FlowRole::Flatten) {
            Err(Error::Dependency { command, .. }) => assert_eq!(command, "train-flatten"),
            _ => panic!("expected a dependency error"),
        }
    }
}
