//! Stage drivers behind the command line. Each stage reads what earlier
//! stages left under the output root and writes its own artifacts there.
mod config;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Ablation, EvalSection, RunConfig, SamplerSection, Stage, OUTPUT_ROOT_ENV};

use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_predictions, masked_l1, EvalReport, Prediction, Setting};
use crate::flowwarp::{
    evaluate_flatten, evaluate_warp, train_flow_network, FlowNet, FlowRole, FlowTrainConfig, FlowTrainReport,
    LossWeights,
};
use crate::image::{Mask, Raster};
use crate::latentspace::{train_autoencoder, Autoencoder, AutoencoderReport};
use crate::nn::CheckpointMeta;
use crate::sampler::{sample_images, sample_traced, InitMode, SamplerConfig};
use crate::seeds::{derive_seed, label};
use crate::synthgen::{build_dataset, DatasetManifest, SamplePair};
use crate::train::write_curve;
use crate::tryondiffusion::{prepare_conditions, train_diffusion, Conditions, DiffusionModel, DiffusionReport, TryOnQuery};

/// Where every artifact of a run lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            data: root.join("data"),
            root,
        }
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

/// A validated config bound to an output layout.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub layout: Layout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowStageReport<E> {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub test: E,
}

/// A try-on request for the `sample` stage: ids from the manifest, or paths.
#[derive(Debug, Clone, Default)]
pub struct SampleRequest {
    /// Sample id, or a directory holding `P_a.png`, `m.png` and `pose_map.f32`.
    pub person: String,
    /// Sample id, or a garment PNG whose non-zero pixels form `m_cp`.
    pub garment: String,
    pub init: Option<InitMode>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub freeu: Option<bool>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub prior_branch: bool,
    pub cons_loss: bool,
    pub init_mode: InitMode,
    pub mean_ssim: f64,
    pub mean_masked_l1: f64,
    pub frechet_proxy: f64,
    pub mean_consistency: f64,
    pub final_diff_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Unpaired test queries on which posterior init lands closer (masked L1
    /// to the warped garment) than Gaussian init, with the full model.
    pub posterior_wins: usize,
    pub unpaired_queries: usize,
    pub posterior_win_fraction: f64,
    /// Mean paired SSIM strictly increases over the three trained rows.
    pub ssim_strictly_increasing: bool,
    pub config_fingerprint: String,
}

impl AblationReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "row",
        "prior_branch",
        "cons_loss",
        "init_mode",
        "mean_ssim",
        "mean_masked_l1",
        "frechet_proxy",
        "mean_consistency",
    ];
}

/// Frozen networks a diffusion stage depends on.
struct Frozen {
    ae: Autoencoder,
    warp: FlowNet,
    flatten: Option<FlowNet>,
}

fn curve_rows<const N: usize>(curve: &[[f64; N]]) -> Vec<Vec<f64>> {
    curve.iter().map(|r| r.to_vec()).collect()
}

fn unbatch_mask(t: &candle_core::Tensor) -> Result<Vec<Mask>> {
    Raster::unbatch(&t.to_dtype(candle_core::DType::F32)?)
}

impl Run {
    /// Validates the config and lays the run out under its output root.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config.output_root);
        Ok(Self { config, layout })
    }

    pub fn with_data_dir(mut self, data: impl Into<PathBuf>) -> Self {
        self.layout.data = data.into();
        self
    }

    fn stage_seed(&self, name: &str) -> u64 {
        derive_seed(self.config.seed, &[label(name)])
    }

    fn check_meta(&self, meta: &CheckpointMeta, stage: Stage) -> Result<()> {
        let expected = self.config.fingerprint(stage)?;
        if meta.config_fingerprint != expected {
            log::warn!(
                "{} checkpoint was trained under config {} but this run's config is {}",
                meta.role,
                meta.config_fingerprint,
                expected
            );
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let m = DatasetManifest::load(&self.layout.data)?;
        if m.seed != self.config.data.seed || m.count != self.config.data.count || m.canvas != self.config.data.canvas {
            log::warn!("dataset at {} was generated under a different data config", self.layout.data.display());
        }
        Ok(m)
    }

    fn split(&self, m: &DatasetManifest) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        if m.train.is_empty() || m.test.is_empty() {
            return Err(Error::Argument("dataset needs non-empty train and test splits".into()));
        }
        Ok((m.load_samples(&m.train)?, m.load_samples(&m.test)?))
    }

    pub fn load_autoencoder(&self) -> Result<Autoencoder> {
        let ae = Autoencoder::load(&self.layout.checkpoint("autoencoder"))?;
        self.check_meta(&ae.meta, Stage::Autoencoder)?;
        Ok(ae)
    }

    pub fn load_flow(&self, role: FlowRole) -> Result<FlowNet> {
        let net = FlowNet::load(&self.layout.checkpoint(role.name()), role)?;
        let stage = match role {
            FlowRole::Warp => Stage::Warp,
            FlowRole::Flatten => Stage::Flatten,
        };
        self.check_meta(&net.meta, stage)?;
        Ok(net)
    }

    pub fn load_diffusion(&self) -> Result<DiffusionModel> {
        let model = DiffusionModel::load(&self.layout.checkpoint("diffusion"))?;
        self.check_meta(&model.meta, Stage::Diffusion)?;
        Ok(model)
    }

    fn frozen(&self, need_flatten: bool) -> Result<Frozen> {
        let ae = self.load_autoencoder()?;
        let warp = self.load_flow(FlowRole::Warp)?;
        let flatten = if need_flatten { Some(self.load_flow(FlowRole::Flatten)?) } else { None };
        Ok(Frozen { ae, warp, flatten })
    }

    /// Generates the synthetic dataset, replacing any previous one.
    pub fn gen_data(&self) -> Result<DatasetManifest> {
        let samples = self.layout.data.join("samples");
        if samples.exists() {
            std::fs::remove_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
        }
        let m = build_dataset(&self.config.data, &self.layout.data)?;
        log::info!("wrote {} samples to {}", m.count, self.layout.data.display());
        Ok(m)
    }

    pub fn train_autoencoder(&self) -> Result<AutoencoderReport> {
        let m = self.manifest()?;
        let (train, test) = self.split(&m)?;
        let (mut ae, report) = train_autoencoder(&train, &test, &self.config.autoencoder, self.stage_seed("autoencoder"))?;
        ae.meta.config_fingerprint = self.config.fingerprint(Stage::Autoencoder)?;
        ae.save(&self.layout.checkpoint("autoencoder"))?;
        let dir = self.layout.reports();
        crate::io::write_json(&dir.join("autoencoder.json"), &report)?;
        write_curve(
            &dir.join("autoencoder_curve.csv"),
            &["step", "total", "recon", "kl"],
            &curve_rows(&report.curve),
        )?;
        log::info!("autoencoder held-out L1 {:?}", report.heldout_l1);
        Ok(report)
    }

    fn train_flow<W>(&self, role: FlowRole, config: &FlowTrainConfig<W>, stage: Stage) -> Result<(FlowNet, FlowTrainReport)>
    where
        W: LossWeights + Clone,
    {
        let m = self.manifest()?;
        let ae = self.load_autoencoder()?;
        let (train, _) = self.split(&m)?;
        let perceptual = (config.loss.per() > 0.0).then_some(&ae);
        let (mut net, report) = train_flow_network(&train, role, config, perceptual, self.stage_seed(role.name()))?;
        net.meta.config_fingerprint = self.config.fingerprint(stage)?;
        net.save(&self.layout.checkpoint(role.name()))?;
        write_curve(
            &self.layout.reports().join(format!("{}_curve.csv", role.name())),
            &FlowTrainReport::HEADER,
            &curve_rows(&report.curve),
        )?;
        Ok((net, report))
    }

    pub fn train_warp(&self) -> Result<FlowStageReport<crate::flowwarp::WarpEval>> {
        let (net, report) = self.train_flow(FlowRole::Warp, &self.config.warp, Stage::Warp)?;
        let m = self.manifest()?;
        let test = m.load_samples(&m.test)?;
        let out = FlowStageReport {
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            test: evaluate_warp(&net, &test)?,
        };
        crate::io::write_json(&self.layout.reports().join("warp.json"), &out)?;
        log::info!("warp test {:?}", out.test);
        Ok(out)
    }

    pub fn train_flatten(&self) -> Result<FlowStageReport<crate::flowwarp::FlattenEval>> {
        let (net, report) = self.train_flow(FlowRole::Flatten, &self.config.flatten, Stage::Flatten)?;
        let m = self.manifest()?;
        let test = m.load_samples(&m.test)?;
        let out = FlowStageReport {
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            test: evaluate_flatten(&net, &test)?,
        };
        crate::io::write_json(&self.layout.reports().join("flatten.json"), &out)?;
        log::info!("flatten test {:?}", out.test);
        Ok(out)
    }

    fn train_conditions(&self, m: &DatasetManifest, frozen: &Frozen) -> Result<Conditions> {
        let train = m.load_samples(&m.train)?;
        let queries: Vec<TryOnQuery> = train.iter().map(TryOnQuery::paired).collect();
        prepare_conditions(&queries, &frozen.ae, &frozen.warp, &self.config.diffusion.arch.tokens)
    }

    fn fit_diffusion(
        &self,
        config: &RunConfig,
        conditions: &Conditions,
        frozen: &Frozen,
        dir: &Path,
        curve: &Path,
    ) -> Result<(DiffusionModel, DiffusionReport)> {
        let dc = config.diffusion_config();
        let (mut model, report) =
            train_diffusion(conditions, &frozen.ae, frozen.flatten.as_ref(), &dc, self.stage_seed("diffusion"))?;
        if !report.freeze_audit.passed() {
            return Err(Error::Numerical("frozen networks changed during diffusion training".into()));
        }
        model.meta.config_fingerprint = config.fingerprint(Stage::Diffusion)?;
        model.save(dir)?;
        write_curve(curve, &DiffusionReport::HEADER, &curve_rows(&report.curve))?;
        Ok((model, report))
    }

    pub fn train_diffusion(&self) -> Result<DiffusionReport> {
        let m = self.manifest()?;
        let frozen = self.frozen(self.config.ablation.cons_loss)?;
        let conditions = self.train_conditions(&m, &frozen)?;
        let (_, report) = self.fit_diffusion(
            &self.config,
            &conditions,
            &frozen,
            &self.layout.checkpoint("diffusion"),
            &self.layout.reports().join("diffusion_curve.csv"),
        )?;
        crate::io::write_json(&self.layout.reports().join("diffusion.json"), &report)?;
        log::info!(
            "diffusion L_diff average {:.5} -> {:.5}",
            report.initial_diff_average,
            report.final_diff_average
        );
        Ok(report)
    }

    /// Samples one try-on image and writes it under `samples/`; returns its path.
    pub fn sample(&self, req: &SampleRequest) -> Result<PathBuf> {
        let m = self.manifest()?;
        let frozen = self.frozen(false)?;
        let model = self.load_diffusion()?;
        let canvas = (m.canvas.height, m.canvas.width);

        let person_sample = m.record(&req.person).ok().map(|_| m.load_sample(&req.person)).transpose()?;
        let garment_sample = m.record(&req.garment).ok().map(|_| m.load_sample(&req.garment)).transpose()?;
        let (p_a, pm, pose, person_id) = match &person_sample {
            Some(s) => (s.p_a.clone(), s.m.clone(), s.pose_map.clone(), s.sample_id.clone()),
            None => load_person_dir(Path::new(&req.person))?,
        };
        let (c, m_cp, garment_id) = match &garment_sample {
            Some(s) => (s.c.clone(), s.m_cp.clone(), s.sample_id.clone()),
            None => load_garment_png(Path::new(&req.garment))?,
        };
        for (what, r) in [("person", &p_a), ("garment", &c)] {
            if (r.height, r.width) != canvas {
                return Err(Error::Shape(format!(
                    "{what} is {}x{}, the model works at {}x{}",
                    r.height, r.width, canvas.0, canvas.1
                )));
            }
        }
        let same = person_sample.is_some() && person_id == garment_id;
        let truth = person_sample.as_ref().filter(|_| same).map(|s| (&s.t, &s.m_c));
        let query = TryOnQuery {
            id: if same { person_id.clone() } else { format!("{person_id}+{garment_id}") },
            p_a: &p_a,
            m: &pm,
            pose_map: &pose,
            c: &c,
            m_cp: &m_cp,
            truth,
        };
        let conditions = prepare_conditions(
            std::slice::from_ref(&query),
            &frozen.ae,
            &frozen.warp,
            &model.arch.tokens,
        )?;
        let mut sc = self.config.sampler_config(req.init.unwrap_or(self.config.ablation.init_mode));
        if let Some(s) = req.steps {
            sc.steps = s;
        }
        if let Some(s) = req.seed {
            sc.seed = s;
        }
        if let Some(on) = req.freeu {
            sc.freeu = on.then_some(self.config.sampler.freeu_factors);
        }
        let schedule = self.config.diffusion.noise_schedule()?;
        let image = sample_traced(&model, &frozen.ae, &conditions, 0, &schedule, &sc, req.trace.as_deref())?;
        let path = self.layout.samples().join(format!("{}.png", query.id));
        image.save_png(&path)?;
        Ok(path)
    }

    fn eval_fingerprint(&self, config: &RunConfig, sampler: &SamplerConfig) -> Result<String> {
        let parts = (config.fingerprint(Stage::Diffusion)?, sampler, &config.eval);
        Ok(crate::io::sha256_hex(&serde_json::to_vec(&parts)?)[..16].to_string())
    }

    pub fn eval(&self, setting: Setting) -> Result<EvalReport> {
        let m = self.manifest()?;
        let frozen = self.frozen(true)?;
        let model = self.load_diffusion()?;
        let test = m.load_samples(&m.test)?;
        let sc = self.config.sampler_config(self.config.ablation.init_mode);
        let set = EvalSet::new(&m, &test, setting, self.config.eval.max_samples)?;
        let conditions = set.conditions(&frozen, &model.arch.tokens)?;
        let fp = self.eval_fingerprint(&self.config, &sc)?;
        let (report, images) = set.evaluate(&model, &frozen, &conditions, &self.config, &sc, &fp)?;
        let stem = format!("eval_{}", setting_name(setting));
        report.write(&self.layout.reports(), &stem)?;
        let dir = self.layout.samples().join(&stem);
        for (id, img) in conditions.ids.iter().zip(&images) {
            img.save_png(&dir.join(format!("{id}.png")))?;
        }
        Ok(report)
    }

    /// Trains the ablation lattice and writes the merged comparison under
    /// `ablation/`. Rows: baseline, +prior, +prior+cons (Gaussian init), and
    /// the last model again with clothes-posterior init.
    pub fn ablate(&self) -> Result<AblationReport> {
        let m = self.manifest()?;
        let frozen = self.frozen(true)?;
        let test = m.load_samples(&m.test)?;
        let train_conds = self.train_conditions(&m, &frozen)?;
        let paired = EvalSet::new(&m, &test, Setting::Paired, self.config.eval.max_samples)?;
        let paired_conds = paired.conditions(&frozen, &self.config.diffusion.arch.tokens)?;
        let unpaired = EvalSet::new(&m, &test, Setting::Unpaired, self.config.eval.max_samples)?;
        let unpaired_conds = unpaired.conditions(&frozen, &self.config.diffusion.arch.tokens)?;
        let dir = self.layout.ablation();
        let schedule = self.config.diffusion.noise_schedule()?;

        let lattice = [("baseline", false, false), ("prior", true, false), ("prior_cons", true, true)];
        let mut rows = Vec::new();
        let mut last_model = None;
        for (name, prior, cons) in lattice {
            let mut cfg = self.config.clone();
            cfg.ablation.prior_branch = prior;
            cfg.ablation.cons_loss = cons;
            log::info!("ablation row {name}");
            let (model, report) = self.fit_diffusion(
                &cfg,
                &train_conds,
                &frozen,
                &dir.join(name).join("checkpoint"),
                &dir.join(name).join("diffusion_curve.csv"),
            )?;
            let mut inits = vec![InitMode::Gaussian];
            if cons {
                inits.push(InitMode::ClothesPosterior);
            }
            for init in inits {
                let sc = cfg.sampler_config(init);
                let fp = self.eval_fingerprint(&cfg, &sc)?;
                let (ev, _) = paired.evaluate(&model, &frozen, &paired_conds, &cfg, &sc, &fp)?;
                let row_name = if init == InitMode::ClothesPosterior { "prior_cons_posterior" } else { name };
                ev.write(&dir.join(row_name), "eval_paired")?;
                let a = &ev.aggregates;
                rows.push(AblationRow {
                    name: row_name.to_string(),
                    prior_branch: prior,
                    cons_loss: cons,
                    init_mode: init,
                    mean_ssim: a.mean_ssim.unwrap_or(f64::NAN),
                    mean_masked_l1: a.mean_masked_l1.unwrap_or(f64::NAN),
                    frechet_proxy: a.frechet_proxy,
                    mean_consistency: a.mean_consistency,
                    final_diff_average: report.final_diff_average,
                });
            }
            last_model = Some(model);
        }
        let model = last_model.expect("lattice is non-empty");

        // posterior vs Gaussian start on unpaired queries, full model
        let gauss = sample_images(&model, &frozen.ae, &unpaired_conds, &schedule, &self.config.sampler_config(InitMode::Gaussian))?;
        let post = sample_images(
            &model,
            &frozen.ae,
            &unpaired_conds,
            &schedule,
            &self.config.sampler_config(InitMode::ClothesPosterior),
        )?;
        let c_w = Raster::unbatch(&unpaired_conds.c_w.to_dtype(candle_core::DType::F32)?)?;
        let m_c = unbatch_mask(&unpaired_conds.m_c)?;
        let mut wins = 0;
        let mut counted = 0;
        for i in 0..gauss.len() {
            if m_c[i].mask_area() == 0 {
                continue;
            }
            counted += 1;
            if masked_l1(&post[i], &c_w[i], &m_c[i])? < masked_l1(&gauss[i], &c_w[i], &m_c[i])? {
                wins += 1;
            }
        }
        let ssim: Vec<f64> = rows.iter().take(3).map(|r| r.mean_ssim).collect();
        let report = AblationReport {
            ssim_strictly_increasing: ssim.windows(2).all(|w| w[0] < w[1]),
            rows,
            posterior_wins: wins,
            unpaired_queries: counted,
            posterior_win_fraction: if counted == 0 { 0.0 } else { wins as f64 / counted as f64 },
            config_fingerprint: self.config.fingerprint(Stage::Flatten)?,
        };
        crate::io::write_json(&dir.join("report.json"), &report)?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(AblationReport::CSV_HEADER)?;
        for r in &report.rows {
            w.write_record([
                r.name.clone(),
                r.prior_branch.to_string(),
                r.cons_loss.to_string(),
                r.init_mode.name().to_string(),
                format!("{:.8}", r.mean_ssim),
                format!("{:.8}", r.mean_masked_l1),
                format!("{:.8}", r.frechet_proxy),
                format!("{:.8}", r.mean_consistency),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(report)
    }
}

fn setting_name(s: Setting) -> &'static str {
    match s {
        Setting::Paired => "paired",
        Setting::Unpaired => "unpaired",
    }
}

/// Test queries for one evaluation setting.
struct EvalSet<'a> {
    setting: Setting,
    /// (person, garment) indices into `samples`.
    pairs: Vec<(usize, usize)>,
    samples: &'a [SamplePair],
}

impl<'a> EvalSet<'a> {
    fn new(m: &DatasetManifest, samples: &'a [SamplePair], setting: Setting, limit: Option<usize>) -> Result<Self> {
        let index = |id: &str| {
            samples
                .iter()
                .position(|s| s.sample_id == id)
                .ok_or_else(|| Error::Argument(format!("{id} is not a test sample")))
        };
        let mut pairs: Vec<(usize, usize)> = match setting {
            Setting::Paired => (0..samples.len()).map(|i| (i, i)).collect(),
            Setting::Unpaired => m
                .unpaired
                .iter()
                .map(|u| Ok((index(&u.person)?, index(&u.garment)?)))
                .collect::<Result<_>>()?,
        };
        if let Some(n) = limit {
            pairs.truncate(n);
        }
        if pairs.len() < 2 {
            return Err(Error::Argument(format!(
                "the {} split needs at least two test queries",
                setting_name(setting)
            )));
        }
        Ok(Self { setting, pairs, samples })
    }

    fn queries(&self) -> Vec<TryOnQuery<'a>> {
        self.pairs
            .iter()
            .map(|&(p, g)| match self.setting {
                Setting::Paired => TryOnQuery::paired(&self.samples[p]),
                Setting::Unpaired => TryOnQuery::unpaired(&self.samples[p], &self.samples[g]),
            })
            .collect()
    }

    fn conditions(&self, frozen: &Frozen, tokens: &crate::tryondiffusion::TokenArch) -> Result<Conditions> {
        prepare_conditions(&self.queries(), &frozen.ae, &frozen.warp, tokens)
    }

    fn evaluate(
        &self,
        model: &DiffusionModel,
        frozen: &Frozen,
        conditions: &Conditions,
        config: &RunConfig,
        sampler: &SamplerConfig,
        fingerprint: &str,
    ) -> Result<(EvalReport, Vec<Raster>)> {
        let flatten = frozen
            .flatten
            .as_ref()
            .ok_or_else(|| Error::dependency("flatten checkpoint", "train-flatten"))?;
        let schedule = config.diffusion.noise_schedule()?;
        let images = sample_images(model, &frozen.ae, conditions, &schedule, sampler)?;
        let m_c = unbatch_mask(&conditions.m_c)?;
        let queries = self.queries();
        let preds: Vec<Prediction> = queries
            .iter()
            .enumerate()
            .map(|(i, q)| Prediction {
                id: q.id.clone(),
                image: &images[i],
                truth: q.truth,
                m_c: &m_c[i],
                c: q.c,
                m_cp: q.m_cp,
            })
            .collect();
        let reference: Vec<&Raster> = self.pairs.iter().map(|&(p, _)| &self.samples[p].t).collect();
        let report = evaluate_predictions(self.setting, &preds, &reference, &frozen.ae, flatten, fingerprint)?;
        Ok((report, images))
    }
}

fn load_person_dir(dir: &Path) -> Result<(Raster, Mask, Raster, String)> {
    if !dir.join("P_a.png").exists() {
        return Err(Error::Argument(format!(
            "person {:?} is neither a sample id nor a directory with P_a.png, m.png and pose_map.f32",
            dir.display().to_string()
        )));
    }
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "person".into());
    Ok((
        Raster::load_png(&dir.join("P_a.png"), 3)?,
        Raster::load_png(&dir.join("m.png"), 1)?,
        crate::io::read_raster_tensor(&dir.join("pose_map.f32"))?,
        id,
    ))
}

/// A flat garment PNG; its mask is every pixel with a non-zero channel.
fn load_garment_png(path: &Path) -> Result<(Raster, Mask, String)> {
    if !path.is_file() {
        return Err(Error::Argument(format!(
            "garment {:?} is neither a sample id nor a PNG file",
            path.display().to_string()
        )));
    }
    let c = Raster::load_png(path, 3)?;
    let m_cp = Raster::mask_from_fn(c.height, c.width, |y, x| c.pixel(y, x).iter().any(|v| *v > 0.0));
    if m_cp.mask_area() == 0 {
        return Err(Error::Argument(format!("garment {} is entirely black", path.display())));
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "garment".into());
    Ok((c, m_cp, id))
}
