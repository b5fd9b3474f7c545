//! The `NCUCKPT1` checkpoint format: magic, length-prefixed JSON header,
//! little-endian `f64` tensor payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::optim::{Adam, AdamHyper};
use crate::encoders::{init_params, EncoderParams, ModelDims, ParamId};
use crate::error::{NcuError, Result};
use crate::numcore::Matrix;
use crate::synthgen::{read_framed, read_payload, write_framed};

pub const CKPT_MAGIC: &[u8; 8] = b"NCUCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    LearnNegatives,
    Unlearn,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::LearnNegatives => "learn_negatives",
            Phase::Unlearn => "unlearn",
        }
    }
}

/// Mean losses of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub loss: f64,
    #[serde(default)]
    pub parts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// Set for unlearn checkpoints.
    pub mode: Option<Mode>,
    pub config: RunConfig,
    pub params: EncoderParams,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    /// Every epoch of every phase that led here.
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    hyper: AdamHyper,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub phase: Phase,
    pub mode: Option<Mode>,
    pub config: RunConfig,
    pub model: ModelDims,
    optimizer: OptimizerHeader,
    rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<TensorEntry>,
}

const MOMENT_PREFIXES: [&str; 2] = ["adam.m.", "adam.v."];

fn tensors_of(c: &Checkpoint) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> =
        ParamId::ALL.iter().map(|&id| (id.name().to_string(), c.params.tensor(id))).collect();
    for (id, m, v) in &c.optimizer.slots {
        out.push((format!("{}{}", MOMENT_PREFIXES[0], id.name()), m));
        out.push((format!("{}{}", MOMENT_PREFIXES[1], id.name()), v));
    }
    out
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let tensors = tensors_of(c);
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry { name: name.clone(), rows: m.rows(), cols: m.cols(), offset };
            offset += m.as_slice().len() * 8;
            e
        })
        .collect();
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        phase: c.phase,
        mode: c.mode,
        config: c.config.clone(),
        model: c.params.dims,
        optimizer: OptimizerHeader { hyper: c.optimizer.hyper, step: c.optimizer.step },
        rng: c.rng.clone(),
        history: c.history.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| NcuError::Format(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    write_framed(&mut w, CKPT_MAGIC, &json)?;
    for (_, m) in &tensors {
        for x in m.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    // Peek at the version first so a future layout reports a version error, not a parse error.
    #[derive(Deserialize)]
    struct VersionOnly {
        version: u32,
    }
    let v: VersionOnly =
        serde_json::from_slice(bytes).map_err(|e| NcuError::Format(format!("checkpoint header: {e}")))?;
    if v.version != CKPT_VERSION {
        return Err(NcuError::Version { found: v.version, expected: CKPT_VERSION });
    }
    serde_json::from_slice(bytes).map_err(|e| NcuError::Format(format!("checkpoint header: {e}")))
}

/// Header only; tensors are not read.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    parse_header(&read_framed(&mut r, CKPT_MAGIC, "checkpoint")?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let header = parse_header(&read_framed(&mut r, CKPT_MAGIC, "checkpoint")?)?;

    let mut expected_offset = 0;
    for t in &header.tensors {
        if t.offset != expected_offset {
            return Err(NcuError::Format(format!("tensor {} is not contiguous", t.name)));
        }
        expected_offset += t.rows * t.cols * 8;
    }
    let payload = read_payload(&mut r, expected_offset, "checkpoint")?;
    let mut by_name: BTreeMap<&str, Matrix> = BTreeMap::new();
    for t in &header.tensors {
        let bytes = &payload[t.offset..t.offset + t.rows * t.cols * 8];
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let m = Matrix::from_vec(t.rows, t.cols, data)?;
        if by_name.insert(&t.name, m).is_some() {
            return Err(NcuError::Format(format!("tensor {} listed twice", t.name)));
        }
    }

    let mut params = init_params(0, header.model)?;
    for id in ParamId::ALL {
        let m = by_name
            .remove(id.name())
            .ok_or_else(|| NcuError::Format(format!("missing tensor {}", id.name())))?;
        let dst = params.tensor_mut(id);
        if m.shape() != dst.shape() {
            return Err(NcuError::Format(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                id.name(),
                m.shape(),
                dst.shape()
            )));
        }
        *dst = m;
    }

    let mut slots = Vec::new();
    for id in ParamId::ALL {
        let m = by_name.remove(format!("{}{}", MOMENT_PREFIXES[0], id.name()).as_str());
        let v = by_name.remove(format!("{}{}", MOMENT_PREFIXES[1], id.name()).as_str());
        match (m, v) {
            (Some(m), Some(v)) if m.shape() == params.tensor(id).shape() && v.shape() == m.shape() => {
                slots.push((id, m, v))
            }
            (None, None) => {}
            _ => return Err(NcuError::Format(format!("inconsistent optimizer state for {}", id.name()))),
        }
    }
    if let Some(name) = by_name.keys().next() {
        return Err(NcuError::Format(format!("unknown tensor {name}")));
    }

    Ok(Checkpoint {
        phase: header.phase,
        mode: header.mode,
        config: header.config,
        params,
        optimizer: Adam { hyper: header.optimizer.hyper, step: header.optimizer.step, slots },
        rng: header.rng,
        history: header.history,
    })
}
