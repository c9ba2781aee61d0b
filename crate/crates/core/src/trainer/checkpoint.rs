//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MLDCKPT\0`, `u32` version, `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u32` rank,
//! `u64` dims and `f64` values; then a `u64`-prefixed JSON metadata blob and
//! finally a CRC32 of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochLog, RunState, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::CenterBank;
use crate::model::{ModelParams, ModelShape, OptimizerState};
use crate::numeric::FeatureVector;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MLDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    shape: ModelShape,
    epoch: usize,
    config: TrainConfig,
    history: Vec<EpochLog>,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn tensors<T: Scalar>(state: &RunState<T>) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (prefix, p) in [("", &state.params), ("velocity.", &state.optimizer.velocity)] {
        for t in p.tensors() {
            out.push(Tensor {
                name: format!("{prefix}{}", t.name),
                dims: t.dims,
                data: t.data.iter().map(|v| v.as_f64()).collect(),
            });
        }
    }
    out.push(Tensor {
        name: "centers".into(),
        dims: vec![state.centers.num_classes(), state.centers.dim()],
        data: state.centers.centers.iter().flat_map(|c| c.0.iter().map(|v| v.as_f64())).collect(),
    });
    out.push(Tensor {
        name: "centers.alpha".into(),
        dims: vec![1],
        data: vec![state.centers.alpha.as_f64()],
    });
    out
}

/// Serializes a run state to bytes.
pub fn write_checkpoint<T: Scalar>(state: &RunState<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let ts = tensors(state);
    buf.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in &ts {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&Meta {
        shape: state.shape(),
        epoch: state.epoch,
        config: state.config.clone(),
        history: state.history.clone(),
    })?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("checkpoint length overflow".into()))
    }
}

fn restore<T: Scalar>(dst: &mut [T], t: &Tensor, dims: &[usize]) -> Result<()> {
    if t.dims != dims {
        return Err(Error::Format(format!(
            "tensor `{}` has shape {:?}, expected {:?}",
            t.name, t.dims, dims
        )));
    }
    for (d, &v) in dst.iter_mut().zip(&t.data) {
        *d = T::from_f64(v).ok_or_else(|| Error::Format(format!("tensor `{}` value not representable", t.name)))?;
    }
    Ok(())
}

/// Parses a checkpoint. The CRC is verified before anything is decoded.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<RunState<T>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: origin.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let size = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let size = size.ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let raw = r.take(size.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        table.push(Tensor { name, dims, data });
    }
    let meta_len = r.len()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    meta.shape.validate()?;

    let find = |name: &str| {
        table
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    };
    let mut params = ModelParams::<T>::zeros(meta.shape);
    let mut velocity = ModelParams::<T>::zeros(meta.shape);
    for (prefix, p) in [("", &mut params), ("velocity.", &mut velocity)] {
        let names: Vec<(String, Vec<usize>)> = p.tensors().into_iter().map(|t| (t.name, t.dims)).collect();
        for ((name, dims), dst) in names.into_iter().zip(p.tensors_mut()) {
            restore(dst, find(&format!("{prefix}{name}"))?, &dims)?;
        }
    }
    let (classes, dim) = (meta.shape.classes, meta.shape.channels);
    let mut flat = vec![T::zero(); classes * dim];
    restore(&mut flat, find("centers")?, &[classes, dim])?;
    let mut alpha = [T::zero()];
    restore(&mut alpha, find("centers.alpha")?, &[1])?;
    let centers = CenterBank::new(
        flat.chunks(dim.max(1)).map(|c| FeatureVector(c.to_vec())).collect(),
        alpha[0],
    )?;
    let optimizer = OptimizerState {
        velocity,
        momentum: T::lit(meta.config.momentum),
        weight_decay: T::lit(meta.config.weight_decay),
    };
    Ok(RunState {
        config: meta.config,
        params,
        centers,
        optimizer,
        epoch: meta.epoch,
        history: meta.history,
    })
}

pub fn save_checkpoint<T: Scalar>(state: &RunState<T>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(state)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename keeps an existing file intact if we are interrupted
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<RunState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
