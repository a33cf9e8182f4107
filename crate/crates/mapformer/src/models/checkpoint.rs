//! Checkpoint archive: a JSON header (format tag, model config, tensor
//! manifest) followed by raw little-endian parameter bytes, plus optional
//! optimizer state for bitwise-consistent resume.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamSet};
use crate::error::{MfError, Result};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 8] = b"MFCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
    extra: Option<ExtraMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ExtraMeta {
    step: usize,
    /// Adam moment arrays follow the parameters, two per parameter (m then v).
    opt_moments: bool,
}

/// Optimizer state carried alongside the parameters.
pub struct CheckpointExtra<T: Real> {
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    extra: Option<&CheckpointExtra<T>>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let tensors: Vec<TensorMeta> = (0..model.params.len())
        .map(|i| TensorMeta {
            name: model.params.name(i).to_string(),
            shape: model.params.tensor(i).shape().to_vec(),
        })
        .collect();
    let header = Header {
        format: 1,
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        tensors,
        extra: extra.map(|e| ExtraMeta { step: e.step, opt_moments: true }),
    };
    let hjson = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(hjson.len() as u64).to_le_bytes())?;
    w.write_all(&hjson)?;
    let write_tensor = |w: &mut BufWriter<File>, t: &Tensor<T>| -> Result<()> {
        for v in t.data() {
            w.write_all(&v.f64().to_le_bytes())?;
        }
        Ok(())
    };
    for i in 0..model.params.len() {
        write_tensor(&mut w, model.params.tensor(i))?;
    }
    if let Some(e) = extra {
        for t in e.m.iter().chain(e.v.iter()) {
            write_tensor(&mut w, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, Option<CheckpointExtra<T>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MfError::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson)?;
    let header: Header = serde_json::from_slice(&hjson)?;
    if header.format != 1 {
        return Err(MfError::Checkpoint(format!("unknown format {}", header.format)));
    }
    if header.dtype != T::DTYPE {
        return Err(MfError::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut read_tensor = |r: &mut BufReader<File>, shape: &[usize]| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(T::of(f64::from_le_bytes(buf)));
        }
        Ok(Tensor::new(shape, data))
    };
    let mut model = Model::new(header.config)?;
    for meta in &header.tensors {
        let t = read_tensor(&mut r, &meta.shape)?;
        model.params.set_by_name(&meta.name, t)?;
    }
    let extra = match header.extra {
        Some(e) if e.opt_moments => {
            let mut m = Vec::with_capacity(header.tensors.len());
            for meta in &header.tensors {
                m.push(read_tensor(&mut r, &meta.shape)?);
            }
            let mut v = Vec::with_capacity(header.tensors.len());
            for meta in &header.tensors {
                v.push(read_tensor(&mut r, &meta.shape)?);
            }
            Some(CheckpointExtra { step: e.step, m, v })
        }
        _ => None,
    };
    Ok((model, extra))
}

/// The config stored in a checkpoint without materializing the model.
pub fn peek_config(path: &Path) -> Result<ModelConfig> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MfError::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson)?;
    let header: Header = serde_json::from_slice(&hjson)?;
    Ok(header.config)
}

