//! Binary checkpoint: magic `OAVL0001`, version, tensor table, CRC32 of
//! every payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::model::{param_shapes, DualEncoder, ModelConfig};
use crate::nn::{Parameter, Tensor};

pub const MAGIC: &[u8; 8] = b"OAVL0001";
pub const VERSION: u32 = 1;

/// Element type codes.
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U32: u8 = 1;
pub const DTYPE_BYTES: u8 = 2;

const STEP_TENSOR: &str = "optimizer.step";
const EPOCH_TENSOR: &str = "train.epoch";
const CONFIG_TENSOR: &str = "config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    model: ModelConfig,
    train: TrainConfig,
}

/// Model parameters with optimizer state, training config and epoch counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoder<f32>,
    pub config: TrainConfig,
    pub epoch: u32,
}

/// One entry of the tensor table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<u32>,
    pub crc32: u32,
}

struct RawTensor {
    name: String,
    dtype: u8,
    dims: Vec<u32>,
    payload: Vec<u8>,
}

fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u32_bytes(xs: &[u32]) -> Vec<u8> {
    xs.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn element_size(dtype: u8) -> Result<usize, TrainError> {
    match dtype {
        DTYPE_F32 | DTYPE_U32 => Ok(4),
        DTYPE_BYTES => Ok(1),
        d => Err(TrainError::Checkpoint(format!("unknown dtype {d}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Truncated(format!("{what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, TrainError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

fn read_table(bytes: &[u8]) -> Result<Vec<RawTensor>, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(TrainError::Version(format!("unknown magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TrainError::Version(format!("format version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    let mut crc = crc32fast::Hasher::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(element_size(dtype)?, |acc, d| acc.checked_mul(*d as usize));
        let n = n.ok_or_else(|| TrainError::Checkpoint(format!("{name}: size overflow")))?;
        let payload = r.take(n, &name)?.to_vec();
        crc.update(&payload);
        tensors.push(RawTensor { name, dtype, dims, payload });
    }
    let stored = r.u32("checksum")?;
    let computed = crc.finalize();
    if stored != computed {
        return Err(TrainError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(tensors)
}

/// Tensor names, types, shapes and payload checksums of a checkpoint file.
pub fn inspect_checkpoint(bytes: &[u8]) -> Result<Vec<TensorInfo>, TrainError> {
    Ok(read_table(bytes)?
        .into_iter()
        .map(|t| TensorInfo { crc32: crc32fast::hash(&t.payload), name: t.name, dtype: t.dtype, dims: t.dims })
        .collect())
}

impl Checkpoint {
    fn tensors(&self) -> Vec<RawTensor> {
        let mut out = Vec::new();
        let f32_tensor = |name: String, shape: &[usize], data: &[f32]| RawTensor {
            name,
            dtype: DTYPE_F32,
            dims: shape.iter().map(|d| *d as u32).collect(),
            payload: f32_bytes(data),
        };
        for p in &self.model.params {
            out.push(f32_tensor(p.name.clone(), p.value.shape(), p.value.data()));
            out.push(f32_tensor(format!("{}.adam_m", p.name), p.value.shape(), &p.m));
            out.push(f32_tensor(format!("{}.adam_v", p.name), p.value.shape(), &p.v));
        }
        let steps: Vec<u32> = self.model.params.iter().map(|p| p.step as u32).collect();
        out.push(RawTensor { name: STEP_TENSOR.into(), dtype: DTYPE_U32, dims: vec![steps.len() as u32], payload: u32_bytes(&steps) });
        out.push(RawTensor { name: EPOCH_TENSOR.into(), dtype: DTYPE_U32, dims: vec![1], payload: u32_bytes(&[self.epoch]) });
        let cfg = StoredConfig { model: self.model.config, train: self.config.clone() };
        let json = serde_json::to_vec(&serde_json::to_value(&cfg).expect("config serializes")).expect("json");
        out.push(RawTensor { name: CONFIG_TENSOR.into(), dtype: DTYPE_BYTES, dims: vec![json.len() as u32], payload: json });
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut crc = crc32fast::Hasher::new();
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
            crc.update(&t.payload);
        }
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let tensors = read_table(bytes)?;
        let find = |name: &str, dtype: u8| -> Result<&RawTensor, TrainError> {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name}")))?;
            if t.dtype != dtype {
                return Err(TrainError::Checkpoint(format!("{name}: dtype {} where {dtype} expected", t.dtype)));
            }
            Ok(t)
        };
        let floats = |t: &RawTensor| -> Vec<f32> {
            t.payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect()
        };
        let words = |t: &RawTensor| -> Vec<u32> {
            t.payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("four bytes"))).collect()
        };
        let cfg: StoredConfig = serde_json::from_slice(&find(CONFIG_TENSOR, DTYPE_BYTES)?.payload)
            .map_err(|e| TrainError::Checkpoint(format!("config: {e}")))?;
        let steps = words(find(STEP_TENSOR, DTYPE_U32)?);
        let epoch = *words(find(EPOCH_TENSOR, DTYPE_U32)?)
            .first()
            .ok_or_else(|| TrainError::Checkpoint("empty epoch tensor".into()))?;
        let shapes = param_shapes(&cfg.model);
        if steps.len() != shapes.len() {
            return Err(TrainError::Checkpoint(format!("{} step counters for {} parameters", steps.len(), shapes.len())));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for ((name, shape), step) in shapes.into_iter().zip(steps) {
            let value = find(name, DTYPE_F32)?;
            let want: Vec<u32> = shape.iter().map(|d| *d as u32).collect();
            if value.dims != want {
                return Err(TrainError::Checkpoint(format!("{name}: shape {:?}, expected {want:?}", value.dims)));
            }
            let m = find(&format!("{name}.adam_m"), DTYPE_F32)?;
            let v = find(&format!("{name}.adam_v"), DTYPE_F32)?;
            if m.dims != want || v.dims != want {
                return Err(TrainError::Checkpoint(format!("{name}: optimizer state shape mismatch")));
            }
            let mut p = Parameter::new(name, Tensor::new(shape, floats(value)).map_err(crate::model::ModelError::from)?);
            p.m = floats(m);
            p.v = floats(v);
            p.step = step as u64;
            params.push(p);
        }
        Ok(Checkpoint { model: DualEncoder { config: cfg.model, params }, config: cfg.train, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
