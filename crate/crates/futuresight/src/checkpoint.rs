//! Binary checkpoint: magic, version, JSON header, little-endian f64 tensor
//! data, trailing CRC-32 of everything before it.
//!
//! ```text
//! b"FSCKPT\0\0" | u32 version | u64 header_len | header JSON | data | u32 crc32
//! ```
//!
//! The header lists the model config and a tensor table in data order. When
//! optimizer state is present the table continues with `adam.m/<name>` and
//! `adam.v/<name>` entries in parameter order.

use std::fs;
use std::io::Write;
use std::path::Path;

use futuresight_core::model::{InjectionMode, Model, ModelConfig};
use futuresight_core::tensor::{ParamStore, Tensor};
use futuresight_core::training::{AdamState, Progress, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FSCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    steps: u64,
    train_config: TrainConfig,
    progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    optimizer: Option<OptimizerHeader>,
}

/// Optimizer state and schedule position saved alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub train_config: TrainConfig,
    pub adam: AdamState,
    pub progress: Progress,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    /// Fails unless the stored config equals `expected`, naming every differing field.
    pub fn expect_config(&self, expected: &ModelConfig, path: &Path) -> Result<()> {
        let stored = serde_json::to_value(self.model.config()).expect("config serializes");
        let want = serde_json::to_value(expected).expect("config serializes");
        let (Some(stored), Some(want)) = (stored.as_object(), want.as_object()) else {
            unreachable!("config serializes to an object")
        };
        let diffs: Vec<String> = want
            .iter()
            .filter(|(k, v)| stored.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint has {}, expected {v}", stored.get(k).cloned().unwrap_or_default()))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::checkpoint(path, format!("config mismatch ({})", diffs.join("; "))))
        }
    }

    pub fn expect_mode(&self, mode: InjectionMode, path: &Path) -> Result<()> {
        let stored = self.model.config().injection_mode;
        if stored == mode {
            Ok(())
        } else {
            Err(Error::checkpoint(path, format!("injection_mode mismatch: checkpoint has {stored:?}, expected {mode:?}")))
        }
    }
}

fn push_tensor(table: &mut Vec<TensorEntry>, data: &mut Vec<u8>, name: String, t: &Tensor) {
    table.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
    });
    for v in t.data() {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(model: &Model, training: Option<&TrainingState>) -> Vec<u8> {
    let params = model.params();
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for id in params.ids() {
        push_tensor(&mut tensors, &mut data, params.name(id).into(), params.value(id));
    }
    if let Some(state) = training {
        for (prefix, moments) in [("adam.m/", &state.adam.m), ("adam.v/", &state.adam.v)] {
            for id in params.ids() {
                push_tensor(&mut tensors, &mut data, format!("{prefix}{}", params.name(id)), &moments[id.index()]);
            }
        }
    }
    let header = CheckpointHeader {
        model_config: model.config().clone(),
        tensors,
        optimizer: training.map(|s| OptimizerHeader {
            steps: s.adam.steps,
            train_config: s.train_config.clone(),
            progress: s.progress,
        }),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| Error::checkpoint(path, m);
    if bytes.len() < MAGIC.len() + 16 {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap());
    if header_len > MAX_HEADER || 20 + header_len as usize > body.len() {
        return Err(bad(format!("header length {header_len} exceeds file")));
    }
    let header_end = 20 + header_len as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    let mut data = &body[header_end..];

    let mut values = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(bad(format!("tensor {}: unsupported dtype {:?}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let need = n.checked_mul(8).filter(|&b| b <= data.len()).ok_or_else(|| bad(format!("tensor {}: data truncated", entry.name)))?;
        let v: Vec<f64> = data[..need].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[need..];
        values.push(Tensor::new(entry.shape.clone(), v).map_err(|e| bad(format!("tensor {}: {e}", entry.name)))?);
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing data bytes", data.len())));
    }

    let n_params = match &header.optimizer {
        Some(_) if header.tensors.len() % 3 == 0 => header.tensors.len() / 3,
        Some(_) => return Err(bad("optimizer tensor table is incomplete".into())),
        None => header.tensors.len(),
    };
    let mut params = ParamStore::new();
    for (entry, value) in header.tensors.iter().zip(&values).take(n_params) {
        params.add(entry.name.clone(), value.clone()).map_err(|e| bad(format!("tensor {}: {e}", entry.name)))?;
    }
    let model = Model::from_parts(header.model_config.clone(), params).map_err(|e| bad(e.to_string()))?;

    let training = match header.optimizer {
        None => None,
        Some(opt) => {
            let mp = model.params();
            let mut moments = [Vec::with_capacity(n_params), Vec::with_capacity(n_params)];
            for (k, prefix) in ["adam.m/", "adam.v/"].iter().enumerate() {
                for id in mp.ids() {
                    let want = format!("{prefix}{}", mp.name(id));
                    let pos = header.tensors[n_params * (k + 1)..]
                        .iter()
                        .take(n_params)
                        .position(|e| e.name == want)
                        .ok_or_else(|| bad(format!("missing optimizer tensor {want}")))?;
                    moments[k].push(values[n_params * (k + 1) + pos].clone());
                }
            }
            let [m, v] = moments;
            Some(TrainingState {
                train_config: opt.train_config,
                adam: AdamState { steps: opt.steps, m, v },
                progress: opt.progress,
            })
        }
    };
    Ok(Checkpoint { model, training })
}

/// Writes atomically through a temporary sibling file.
pub fn save(path: &Path, model: &Model, training: Option<&TrainingState>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(model, training)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and requires its injection mode to be `mode`.
pub fn load_with_mode(path: &Path, mode: InjectionMode) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    ckpt.expect_mode(mode, path)?;
    Ok(ckpt)
}
