//! Binary checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, `u32` format version, `u64` header
//! length, a JSON header describing every tensor, the raw tensor data, and a
//! trailing CRC-32 of all preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::history::{write_atomic, EpochRecord};
use super::schedule::TrainState;
use crate::error::{Error, Result};
use crate::models::{BackboneSpec, Model};

pub const MAGIC: &[u8; 8] = b"KDSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub role: Role,
    pub spec: BackboneSpec,
    pub parameters: BTreeMap<String, Tensor>,
    /// Optimizer momentum per parameter name.
    pub velocity: BTreeMap<String, Tensor>,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    /// Resolved configuration of the producing run.
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    role: Role,
    spec: BackboneSpec,
    state: TrainState,
    history: Vec<EpochRecord>,
    config: Option<serde_json::Value>,
    parameters: Vec<Entry>,
    velocity: Vec<Entry>,
    data_len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

fn dtype_tag(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::invalid(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn encode(map: &BTreeMap<String, Tensor>, data: &mut Vec<u8>) -> Result<Vec<Entry>> {
    let mut entries = Vec::with_capacity(map.len());
    for (name, t) in map {
        let dtype = dtype_tag(t.dtype())?;
        let offset = data.len() as u64;
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
        }
        entries.push(Entry {
            name: name.clone(),
            dtype: dtype.into(),
            shape: t.dims().to_vec(),
            offset,
            len: data.len() as u64 - offset,
        });
    }
    Ok(entries)
}

fn decode(entries: &[Entry], data: &[u8], data_start: usize) -> Result<BTreeMap<String, Tensor>> {
    let mut map = BTreeMap::new();
    for e in entries {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(Error::Parse { offset: data_start as u64, reason: format!("unknown dtype `{other}` for {}", e.name) })
            }
        };
        let count: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.len).filter(|&end| end as usize <= data.len());
        let Some(end) = end else {
            return Err(Error::Parse {
                offset: (data_start + data.len()) as u64,
                reason: format!("tensor {} extends past the end of the data section", e.name),
            });
        };
        if e.len as usize != count * width {
            return Err(Error::Parse {
                offset: data_start as u64 + e.offset,
                reason: format!("tensor {} holds {} bytes, shape {:?} needs {}", e.name, e.len, e.shape, count * width),
            });
        }
        let bytes = &data[e.offset as usize..end as usize];
        let t = if width == 4 {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        } else {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        };
        if map.insert(e.name.clone(), t).is_some() {
            return Err(Error::Parse { offset: data_start as u64 + e.offset, reason: format!("duplicate tensor {}", e.name) });
        }
    }
    Ok(map)
}

impl Checkpoint {
    /// Capture `model` (parameters and buffers) with its training state.
    pub fn capture(role: Role, model: &Model, velocity: &BTreeMap<String, Tensor>, state: &TrainState, history: &[EpochRecord], config: Option<serde_json::Value>) -> Result<Self> {
        Ok(Self {
            role,
            spec: model.spec().clone(),
            parameters: model.snapshot()?,
            velocity: velocity.iter().map(|(k, v)| Ok((k.clone(), v.copy()?))).collect::<Result<_>>()?,
            state: state.clone(),
            history: history.to_vec(),
            config,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parameters(&self.spec, &self.parameters)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let parameters = encode(&self.parameters, &mut data)?;
        let velocity = encode(&self.velocity, &mut data)?;
        let header = Header {
            role: self.role,
            spec: self.spec.clone(),
            state: self.state.clone(),
            history: self.history.clone(),
            config: self.config.clone(),
            parameters,
            velocity,
            data_len: data.len() as u64,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + data.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Parse { offset: bytes.len() as u64, reason: format!("file truncated in {what}") };
        if bytes.len() < 8 {
            return Err(truncated("magic"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Parse { offset: 0, reason: "not a checkpoint file (bad magic)".into() });
        }
        if bytes.len() < PREAMBLE {
            return Err(truncated("preamble"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = (PREAMBLE as u64).checked_add(header_len).filter(|&e| e <= bytes.len() as u64);
        let Some(header_end) = header_end.map(|e| e as usize) else {
            return Err(truncated("header"));
        };
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| Error::Parse {
            offset: (PREAMBLE + e.column().saturating_sub(1)) as u64,
            reason: format!("invalid header: {e}"),
        })?;
        let data_end = (header_end as u64).checked_add(header.data_len).filter(|&e| e + 4 <= bytes.len() as u64);
        let Some(data_end) = data_end.map(|e| e as usize) else {
            return Err(truncated("tensor data"));
        };
        if data_end + 4 != bytes.len() {
            return Err(Error::Parse { offset: (data_end + 4) as u64, reason: "trailing bytes after checksum".into() });
        }
        let stored = u32::from_le_bytes(bytes[data_end..].try_into().unwrap());
        if stored != crc32fast::hash(&bytes[..data_end]) {
            return Err(Error::Parse { offset: data_end as u64, reason: "checksum mismatch".into() });
        }
        let data = &bytes[header_end..data_end];
        Ok(Self {
            role: header.role,
            spec: header.spec,
            parameters: decode(&header.parameters, data, header_end)?,
            velocity: decode(&header.velocity, data, header_end)?,
            state: header.state,
            history: header.history,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Format version stored in the checkpoint at `path`, read from its preamble.
pub fn peek_version(path: &Path) -> Result<u32> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Parse { offset: 0, reason: "not a checkpoint file".into() });
    }
    Ok(u32::from_le_bytes(bytes[8..12].try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_backbone;

    fn sample() -> Checkpoint {
        let spec = BackboneSpec::registered("tiny-student", 3).unwrap();
        let model = build_backbone(&spec, 5).unwrap();
        let mut velocity = BTreeMap::new();
        velocity.insert("fc.bias".to_string(), Tensor::new(&[0.5f32, -0.25, 1e-30], &Device::Cpu).unwrap());
        let mut state = TrainState::with_initial_loss(0.01, 1.0 / 3.0);
        state.epoch = 4;
        Checkpoint::capture(Role::Student, &model, &velocity, &state, &[], Some(serde_json::json!({"seed": 5}))).unwrap()
    }

    #[test]
    fn bytes_round_trip_idempotent() {
        let a = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.state, sample().state);
        assert_eq!(back.parameters.len(), sample().parameters.len());
    }

    #[test]
    fn truncation_reports_offset() {
        let a = sample().to_bytes().unwrap();
        for cut in [4, 15, 40, a.len() / 2, a.len() - 1] {
            match Checkpoint::from_bytes(&a[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corruption_detected() {
        let mut a = sample().to_bytes().unwrap();
        let n = a.len();
        a[n - 10] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&a), Err(Error::Parse { .. })));
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut a = sample().to_bytes().unwrap();
        a[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&a).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: CHECKPOINT_VERSION }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }
}
