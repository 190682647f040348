use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-b, b) with b = sqrt(6 / fan_in) (He initialization for ReLU nets).
    KaimingUniform { fan_in: usize },
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    BiasUniform { fan_in: usize },
    Normal { std: f64 },
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::BiasUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Normal { std } => {
                use rand_distr::{Distribution, Normal};
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

/// Named trainable parameters (in creation order) and non-trainable buffers.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let var = self.make(init.sample(n, rng), shape)?;
        let t = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(t)
    }

    /// Re-initializes an existing parameter in place.
    pub fn reset(&mut self, name: &str, init: Init) -> Result<Tensor> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Validation(format!("no parameter `{name}`")))?
            .clone();
        let mut dummy = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let values = init.sample(var.elem_count(), &mut dummy);
        var.set(&Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?)?;
        Ok(var.as_tensor().clone())
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], fill: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let var = self.make(vec![fill; n], shape)?;
        let t = var.as_tensor().clone();
        self.buffers.push((name.to_string(), var));
        Ok(t)
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn buffer(&self, name: &str) -> Option<&Var> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Flat f64 copy of a tensor.
    pub fn values(t: &Tensor) -> Result<Vec<f64>> {
        Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Overwrites a variable from f64 values, rounding to the store dtype.
    pub fn assign(&self, var: &Var, values: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Copies every parameter and buffer from `other`, matched by name.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (mine, theirs) in [(&self.vars, &other.vars), (&self.buffers, &other.buffers)] {
            for (name, var) in mine.iter() {
                let src = theirs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| v)
                    .ok_or_else(|| Error::Validation(format!("source has no `{name}`")))?;
                if src.shape() != var.shape() {
                    return Err(Error::Validation(format!(
                        "`{name}`: shape {:?} vs {:?}",
                        var.shape(),
                        src.shape()
                    )));
                }
                var.set(&src.as_tensor().to_dtype(self.dtype)?.copy()?)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, v)| Ok((n.clone(), Self::values(v.as_tensor())?)))
            .collect()
    }
}

const MAGIC: &[u8; 8] = b"ECGSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader<C> {
    version: u32,
    dtype: String,
    step: u64,
    config: C,
    tensors: Vec<TensorEntry>,
}

/// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
/// every tensor as little-endian f32 or f64 in header order.
pub fn save_checkpoint<C: Serialize>(path: &Path, store: &ParamStore, config: &C, step: u64) -> Result<()> {
    let tensors: Vec<TensorEntry> = store
        .vars
        .iter()
        .map(|(n, v)| (n, v, false))
        .chain(store.buffers.iter().map(|(n, v)| (n, v, true)))
        .map(|(n, v, buffer)| TensorEntry {
            name: n.clone(),
            shape: v.dims().to_vec(),
            buffer,
        })
        .collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: store.dtype.as_str().to_string(),
        step,
        config,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::parse("checkpoint header", e))?;
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(Error::io(path));
    write(MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, v) in store.vars.iter().chain(store.buffers.iter()) {
        let flat = v.as_tensor().flatten_all()?;
        match store.dtype {
            DType::F64 => {
                for x in flat.to_vec1::<f64>()? {
                    write(&x.to_le_bytes())?;
                }
            }
            _ => {
                for x in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    write(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush().map_err(Error::io(path))
}

pub struct LoadedCheckpoint<C> {
    pub config: C,
    pub step: u64,
    pub dtype: DType,
    tensors: Vec<(TensorEntry, Vec<f64>)>,
}

pub fn read_checkpoint<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<LoadedCheckpoint<C>> {
    let bad = |m: &str| Error::parse(path.display().to_string(), m.to_string());
    let mut r = BufReader::new(File::open(path).map_err(Error::io(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(Error::io(path))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(Error::io(path))?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(Error::io(path))?;
    let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
    r.read_exact(&mut json).map_err(Error::io(path))?;
    let header: CheckpointHeader<C> = serde_json::from_slice(&json).map_err(|e| Error::parse("checkpoint header", e))?;
    let dtype = match header.dtype.as_str() {
        "f64" => DType::F64,
        "f32" => DType::F32,
        other => return Err(bad(&format!("unsupported dtype {other}"))),
    };
    let width = dtype.size_in_bytes();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * width];
        r.read_exact(&mut bytes).map_err(Error::io(path))?;
        let values = if dtype == DType::F64 {
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        tensors.push((entry, values));
    }
    Ok(LoadedCheckpoint {
        config: header.config,
        step: header.step,
        dtype,
        tensors,
    })
}

impl<C> LoadedCheckpoint<C> {
    /// Writes the stored tensors into a store with the same layout.
    pub fn restore(&self, store: &ParamStore) -> Result<()> {
        let expected = store.vars.len() + store.buffers.len();
        if expected != self.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {expected}",
                self.tensors.len()
            )));
        }
        for (entry, values) in &self.tensors {
            let list = if entry.buffer { &store.buffers } else { &store.vars };
            let var = list
                .iter()
                .find(|(n, _)| *n == entry.name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Validation(format!("model has no tensor `{}`", entry.name)))?;
            if var.dims() != entry.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "`{}`: checkpoint shape {:?}, model shape {:?}",
                    entry.name,
                    entry.shape,
                    var.dims()
                )));
            }
            store.assign(var, values.clone())?;
        }
        Ok(())
    }
}
