//! Versioned binary checkpoint: training config, model spec, and every
//! parameter tensor by name. Reloading reproduces forward outputs
//! bit-for-bit at the same precision.
//!
//! ```text
//! magic     b"FLCK"
//! version   u32 = 1
//! scalar    u8, bytes per element (4 = f32, 8 = f64)
//! epoch     u32
//! val flag  u8, 1 if a validation C-index follows
//! val c     f64
//! config    u32 length + TrainConfig JSON
//! spec      u32 length + ModelSpec JSON
//! params    u32 count, then per parameter:
//!           name (u32 length + utf-8), rank u32, extents u32 each,
//!           element payload little-endian
//! ```

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::numerics::{Scalar, Tensor};
use crate::trainer::config::TrainConfig;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: [u8; 4] = *b"FLCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    pub epoch: usize,
    /// None when no validation pair was comparable during training.
    pub val_c_index: Option<f64>,
    pub model: Model<S>,
}

#[derive(Debug)]
pub enum LoadedCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl LoadedCheckpoint {
    pub fn config(&self) -> &TrainConfig {
        match self {
            LoadedCheckpoint::F32(c) => &c.config,
            LoadedCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            LoadedCheckpoint::F32(c) => &c.spec,
            LoadedCheckpoint::F64(c) => &c.spec,
        }
    }

    pub fn epoch(&self) -> usize {
        match self {
            LoadedCheckpoint::F32(c) => c.epoch,
            LoadedCheckpoint::F64(c) => c.epoch,
        }
    }

    pub fn val_c_index(&self) -> Option<f64> {
        match self {
            LoadedCheckpoint::F32(c) => c.val_c_index,
            LoadedCheckpoint::F64(c) => c.val_c_index,
        }
    }
}

pub fn save_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_checkpoint_to(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint_to<S: Scalar, W: Write>(w: &mut W, ckpt: &Checkpoint<S>) -> Result<()> {
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&[S::BYTES as u8])?;
    w.write_all(&(ckpt.epoch as u32).to_le_bytes())?;
    w.write_all(&[u8::from(ckpt.val_c_index.is_some())])?;
    w.write_all(&ckpt.val_c_index.unwrap_or(0.0).to_le_bytes())?;
    for json in [
        serde_json::to_string(&ckpt.config).expect("config serializes"),
        serde_json::to_string(&ckpt.spec).expect("spec serializes"),
    ] {
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
    }
    let params = ckpt.model.named_params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes_vec())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    load_checkpoint_from(&mut r).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint_from<R: Read>(r: &mut R) -> Result<LoadedCheckpoint> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:02x?}, expected {CKPT_MAGIC:02x?}"
        )));
    }
    let version = read_u32(r, "version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    let mut scalar = [0u8; 1];
    read_exact(r, &mut scalar, "scalar width")?;
    let epoch = read_u32(r, "epoch")? as usize;
    let mut flag = [0u8; 1];
    read_exact(r, &mut flag, "validation flag")?;
    let mut val_bytes = [0u8; 8];
    read_exact(r, &mut val_bytes, "validation c-index")?;
    let val_c_index = (flag[0] == 1).then(|| f64::from_le_bytes(val_bytes));
    let config: TrainConfig = read_json(r, "config")?;
    let spec: ModelSpec = read_json(r, "model spec")?;
    match scalar[0] as usize {
        n if n == f32::BYTES => Ok(LoadedCheckpoint::F32(finish_load::<f32, R>(
            r, config, spec, epoch, val_c_index,
        )?)),
        n if n == f64::BYTES => Ok(LoadedCheckpoint::F64(finish_load::<f64, R>(
            r, config, spec, epoch, val_c_index,
        )?)),
        other => Err(Error::format(format!("unknown scalar width {other}"))),
    }
}

fn finish_load<S: Scalar, R: Read>(
    r: &mut R,
    config: TrainConfig,
    spec: ModelSpec,
    epoch: usize,
    val_c_index: Option<f64>,
) -> Result<Checkpoint<S>> {
    let mut model: Model<S> =
        Model::init(&spec, 0).map_err(|e| Error::format(format!("stored spec is invalid: {e}")))?;
    let n_params = read_u32(r, "parameter count")? as usize;
    let expected = model.named_params().len();
    if n_params != expected {
        return Err(Error::format(format!(
            "{n_params} stored parameters, spec implies {expected}"
        )));
    }
    let mut filled: HashSet<String> = HashSet::new();
    for _ in 0..n_params {
        let name = read_string(r, "parameter name")?;
        let rank = read_u32(r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, "extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * S::BYTES];
        read_exact(r, &mut payload, "parameter payload")?;
        let data: Vec<S> = payload.chunks_exact(S::BYTES).map(S::from_le_slice).collect();
        let tensor = Tensor::new(shape, data)?;
        let mut params = model.named_params_mut();
        let slot = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::format(format!("stored parameter {name:?} not in model")))?;
        if slot.1.shape() != tensor.shape() {
            return Err(Error::format(format!(
                "{name}: stored shape {:?} does not match model shape {:?}",
                tensor.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = tensor;
        if !filled.insert(name.clone()) {
            return Err(Error::format(format!("parameter {name:?} stored twice")));
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after parameters"));
    }
    Ok(Checkpoint { config, spec, epoch, val_c_index, model })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::format(format!("{what} is not valid utf-8")))
}

fn read_json<R: Read, T: serde::de::DeserializeOwned>(r: &mut R, what: &str) -> Result<T> {
    let text = read_string(r, what)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{what}: {e}")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated while reading {what}")))
}
