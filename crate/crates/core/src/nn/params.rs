use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal with standard deviation `gain * sqrt(1 / fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Normal(f64),
}

/// Named parameter tensors for one network, created in a deterministic order
/// from a seeded generator.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    strict: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            strict: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Returns the named parameter, creating it with `init` on first use.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        if self.strict {
            return Err(Error::Shape(format!("parameter {name} missing from checkpoint")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Fan { fan_in, gain } => self.normal(n, gain / (fan_in.max(1) as f64).sqrt()),
            Init::Normal(std) => self.normal(n, std),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        if std == 0.0 {
            return vec![0.0; n];
        }
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// SHA-256 over names, shapes and f32 values in name order.
    pub fn hash(&self) -> Result<String> {
        self.hash_prefix("")
    }

    /// Like [`ParamStore::hash`], restricted to names starting with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> Result<String> {
        let mut bytes = Vec::new();
        for (name, v) in self.vars.iter().filter(|(n, _)| n.starts_with(prefix)) {
            bytes.extend_from_slice(name.as_bytes());
            for d in v.dims() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(io::sha256_hex(&bytes))
    }

    pub fn total_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn save_tensors(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        for (name, v) in &self.vars {
            let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            io::write_tensor_file(&dir.join(format!("{name}.f32")), name, v.dims(), &data)?;
        }
        Ok(())
    }

    /// Loads every tensor file of `dir`; the store is strict afterwards, so a
    /// network asking for a parameter the checkpoint lacks fails loudly.
    pub fn load_tensors(dir: &Path, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(0, dtype);
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "f32"))
            .collect();
        entries.sort();
        for path in entries {
            let (header, data) = io::read_tensor_file(&path)?;
            let t = Tensor::from_vec(data, header.shape.as_slice(), &store.device)?.to_dtype(dtype)?;
            store.vars.insert(header.field, Var::from_tensor(&t)?);
        }
        store.strict = true;
        Ok(store)
    }

    /// Copy with every value converted to `dtype` (used to run f32 checkpoints in f64).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(0, dtype);
        for (name, v) in &self.vars {
            out.vars.insert(name.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?);
        }
        out.strict = self.strict;
        Ok(out)
    }
}

/// Scoped view over a [`ParamStore`] used while constructing a network.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    frozen: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, frozen: bool) -> Self {
        Self {
            store,
            prefix: String::new(),
            frozen,
        }
    }

    pub fn push(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            frozen: self.frozen,
        }
    }

    /// The parameter as a graph tensor; frozen builders hand out detached
    /// copies so no gradient is ever accumulated for them.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let var = self.store.get(&full, shape, init)?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

/// Checkpoint metadata written next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: String,
    pub seed: u64,
    pub step: usize,
    /// Last training loss; NaN (stored as null) for untrained networks.
    #[serde(deserialize_with = "nan_from_null")]
    pub loss: f64,
    pub trained: bool,
    pub config_fingerprint: String,
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// A checkpoint container directory: `arch.json`, `meta.json`, `tensors/`.
pub struct Checkpoint<A> {
    pub arch: A,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl<A: Serialize + for<'de> Deserialize<'de>> Checkpoint<A> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        io::write_json(&dir.join("arch.json"), &self.arch)?;
        io::write_json(&dir.join("meta.json"), &self.meta)?;
        let tensors = dir.join("tensors");
        if tensors.exists() {
            std::fs::remove_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
        }
        self.params.save_tensors(&tensors)
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::Io {
                path: meta_path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint metadata missing"),
            });
        }
        Ok(Self {
            arch: io::read_json(&dir.join("arch.json"))?,
            meta: io::read_json(&meta_path)?,
            params: ParamStore::load_tensors(&dir.join("tensors"), dtype)?,
        })
    }
}

pub fn checkpoint_exists(dir: &Path) -> bool {
    dir.join("meta.json").exists() && dir.join("arch.json").exists()
}
