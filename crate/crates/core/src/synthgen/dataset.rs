use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compose::{compose_sample, SamplePair};
use super::garment::{gen_garment, GarmentSpec, PatternKind};
use super::person::{person_context, PersonSpec};
use super::truth::gen_truth_warp;
use super::Canvas;
use crate::error::{Error, Result};
use crate::flowwarp::field::FlowField;
use crate::image::Raster;
use crate::io;
use crate::seeds::derive_seed;

pub const DATASET_VERSION: &str = "synthgen-1";
const MANIFEST_FILE: &str = "manifest.jsonl";
const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub canvas: Canvas,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 500,
            seed: 0,
            canvas: Canvas::new(64, 48),
            train_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn train_count(&self) -> usize {
        ((self.count as f64) * self.train_fraction).round() as usize
    }
}

/// One manifest line: file paths (relative to the dataset root) keyed by
/// sample field name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    #[serde(rename = "C")]
    pub c: String,
    pub m_cp: String,
    #[serde(rename = "P")]
    pub p: String,
    #[serde(rename = "P_a")]
    pub p_a: String,
    pub m: String,
    #[serde(rename = "m_C")]
    pub m_c: String,
    #[serde(rename = "T")]
    pub t: String,
    #[serde(rename = "C_w_gt")]
    pub c_w_gt: String,
    #[serde(rename = "F_gt")]
    pub f_gt: String,
    #[serde(rename = "F_gt_inv")]
    pub f_gt_inv: String,
    pub pose_map: String,
    pub sample_id: String,
}

impl ManifestRecord {
    fn for_id(id: &str) -> Self {
        let f = |name: &str| format!("samples/{id}/{name}");
        Self {
            c: f("C.png"),
            m_cp: f("m_cp.png"),
            p: f("P.png"),
            p_a: f("P_a.png"),
            m: f("m.png"),
            m_c: f("m_C.png"),
            t: f("T.png"),
            c_w_gt: f("C_w_gt.png"),
            f_gt: f("F_gt.f32"),
            f_gt_inv: f("F_gt_inv.f32"),
            pose_map: f("pose_map.f32"),
            sample_id: id.to_string(),
        }
    }

    pub fn files(&self) -> [&str; 11] {
        [
            &self.c,
            &self.m_cp,
            &self.p,
            &self.p_a,
            &self.m,
            &self.m_c,
            &self.t,
            &self.c_w_gt,
            &self.f_gt,
            &self.f_gt_inv,
            &self.pose_map,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnpairedEntry {
    pub person: String,
    pub garment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub count: usize,
    pub canvas: Canvas,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Each test person paired with a different test garment (seeded derangement).
    pub unpaired: Vec<UnpairedEntry>,
    #[serde(skip)]
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn record(&self, id: &str) -> Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.sample_id == id)
            .ok_or_else(|| Error::Argument(format!("sample {id} not in manifest")))
    }

    pub fn load_sample(&self, id: &str) -> Result<SamplePair> {
        load_sample(&self.root, self.record(id)?)
    }

    /// Loads the listed samples in parallel, preserving order.
    pub fn load_samples(&self, ids: &[String]) -> Result<Vec<SamplePair>> {
        ids.par_iter().map(|id| self.load_sample(id)).collect()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// Reads `dataset.json` and `manifest.jsonl` under `root` and checks that
    /// every referenced file exists.
    pub fn load(root: &Path) -> Result<Self> {
        let meta = root.join(DATASET_FILE);
        if !meta.exists() {
            return Err(Error::dependency(format!("dataset at {}", root.display()), "gen-data"));
        }
        let mut manifest: DatasetManifest = io::read_json(&meta)?;
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE)).map_err(|e| Error::io(root.join(MANIFEST_FILE), e))?;
        manifest.records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        manifest.root = root.to_path_buf();
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::Validation(vec![format!("duplicate sample id {}", r.sample_id)]));
            }
            for f in r.files() {
                if !self.root.join(f).exists() {
                    return Err(Error::Validation(vec![format!("missing file {f}")]));
                }
            }
        }
        if self.records.len() != self.count {
            return Err(Error::Validation(vec![format!(
                "manifest lists {} records, header says {}",
                self.records.len(),
                self.count
            )]));
        }
        Ok(())
    }
}

pub fn load_sample(root: &Path, r: &ManifestRecord) -> Result<SamplePair> {
    let img = |p: &str| Raster::load_png(&root.join(p), 3);
    let mask = |p: &str| Raster::load_png(&root.join(p), 1);
    Ok(SamplePair {
        sample_id: r.sample_id.clone(),
        c: img(&r.c)?,
        m_cp: mask(&r.m_cp)?,
        p: img(&r.p)?,
        p_a: img(&r.p_a)?,
        m: mask(&r.m)?,
        m_c: mask(&r.m_c)?,
        t: img(&r.t)?,
        c_w_gt: img(&r.c_w_gt)?,
        f_gt: FlowField::from_raster(io::read_raster_tensor(&root.join(&r.f_gt))?)?,
        f_gt_inv: FlowField::from_raster(io::read_raster_tensor(&root.join(&r.f_gt_inv))?)?,
        pose_map: io::read_raster_tensor(&root.join(&r.pose_map))?,
    })
}

fn write_sample(root: &Path, r: &ManifestRecord, s: &SamplePair) -> Result<()> {
    s.c.save_png(&root.join(&r.c))?;
    s.m_cp.save_png(&root.join(&r.m_cp))?;
    s.p.save_png(&root.join(&r.p))?;
    s.p_a.save_png(&root.join(&r.p_a))?;
    s.m.save_png(&root.join(&r.m))?;
    s.m_c.save_png(&root.join(&r.m_c))?;
    s.t.save_png(&root.join(&r.t))?;
    s.c_w_gt.save_png(&root.join(&r.c_w_gt))?;
    io::write_raster_tensor(&root.join(&r.f_gt), "F_gt", &s.f_gt.as_raster())?;
    io::write_raster_tensor(&root.join(&r.f_gt_inv), "F_gt_inv", &s.f_gt_inv.as_raster())?;
    io::write_raster_tensor(&root.join(&r.pose_map), "pose_map", &s.pose_map)
}

/// Random garment and person specifications for one sample.
pub fn sample_specs(canvas: Canvas, rng: &mut ChaCha8Rng) -> (GarmentSpec, PersonSpec) {
    let kind = PatternKind::ALL[rng.random_range(0..PatternKind::ALL.len())];
    let base = [
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
    ];
    let mut g = GarmentSpec::solid(base, canvas);
    g.pattern_kind = kind;
    match kind {
        PatternKind::Solid => {}
        PatternKind::Stripes => {
            g.pattern_params.insert("width".into(), rng.random_range(2..=8) as f64);
        }
        PatternKind::Checker => {
            g.pattern_params.insert("cell".into(), rng.random_range(3..=8) as f64);
        }
        PatternKind::GlyphText => {
            g.pattern_params.insert("count".into(), rng.random_range(2..=4) as f64);
        }
        PatternKind::LogoPatch => {
            g.pattern_params.insert("x".into(), rng.random_range(0.35..0.65));
            g.pattern_params.insert("y".into(), rng.random_range(0.35..0.55));
            g.pattern_params.insert("size".into(), rng.random_range(0.15..0.3));
        }
    }
    let tone: f32 = rng.random();
    let p = PersonSpec {
        shoulder_width: rng.random_range(0.44..0.56),
        torso_height: rng.random_range(0.37..0.44),
        lean_deg: rng.random_range(-6.0..6.0),
        skin_tone: [0.45 + 0.45 * tone, 0.3 + 0.4 * tone, 0.2 + 0.4 * tone],
        seed: rng.random(),
        canvas,
    };
    (g, p)
}

/// Generates sample `index` of a dataset, resampling specs on degenerate draws.
pub fn generate_sample(config: &DatasetConfig, index: usize) -> Result<SamplePair> {
    let id = sample_id(index);
    let mut last = None;
    for attempt in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[index as u64, attempt]));
        let (gspec, pspec) = sample_specs(config.canvas, &mut rng);
        let result = (|| {
            let (c, m_cp) = gen_garment(&gspec, rng.random())?;
            let person = person_context(&pspec)?;
            let warp = gen_truth_warp(&person, rng.random())?;
            compose_sample(&c, &m_cp, &person, &warp, &id)
        })();
        match result {
            Ok(s) => return Ok(s),
            Err(e @ (Error::DegenerateSample(_) | Error::Geometry(_))) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::DegenerateSample(id)))
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Writes every sample, `manifest.jsonl` and `dataset.json` under `out`.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.canvas.validate()?;
    if config.count == 0 {
        return Err(Error::Argument("dataset count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::Argument("train fraction must lie in [0, 1]".into()));
    }
    io::ensure_dir(out)?;
    let records: Vec<ManifestRecord> = (0..config.count).map(|i| ManifestRecord::for_id(&sample_id(i))).collect();
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let s = generate_sample(config, i)?;
            write_sample(out, r, &s)
        })
        .collect::<Result<Vec<()>>>()?;

    let ids: Vec<String> = records.iter().map(|r| r.sample_id.clone()).collect();
    let n_train = config.train_count();
    let train = ids[..n_train].to_vec();
    let test = ids[n_train..].to_vec();
    let unpaired = derangement(&test, derive_seed(config.seed, &[u64::MAX]));

    let mut lines = Vec::new();
    for r in &records {
        lines.extend(serde_json::to_vec(r)?);
        lines.push(b'\n');
    }
    io::write_bytes(&out.join(MANIFEST_FILE), &lines)?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION.into(),
        seed: config.seed,
        count: config.count,
        canvas: config.canvas,
        train,
        test,
        unpaired,
        records,
        root: out.to_path_buf(),
    };
    io::write_json(&out.join(DATASET_FILE), &manifest)?;
    Ok(manifest)
}

/// Pairs every id with a different id; empty for fewer than two ids.
fn derangement(ids: &[String], seed: u64) -> Vec<UnpairedEntry> {
    if ids.len() < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng);
    // a shuffled cycle: position k hands its garment to position k+1
    let mut target = vec![0; ids.len()];
    for k in 0..order.len() {
        target[order[k]] = order[(k + 1) % order.len()];
    }
    ids.iter()
        .enumerate()
        .map(|(i, id)| UnpairedEntry {
            person: id.clone(),
            garment: ids[target[i]].clone(),
        })
        .collect()
}
