//! Binary checkpoints: magic, JSON header, then little-endian f64 payload
//! (online parameters, EMA parameters, Adam first and second moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::matching::Assignment;
use crate::network::params::{AdamW, ParamStore};
use crate::network::{ModelState, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SWDTCKPT";
pub const FORMAT_VERSION: &str = "switchdit-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub steps: usize,
    pub cosine_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub build: String,
    pub config: TrainConfig,
    pub step: usize,
    pub adam_step: u64,
    pub assignment: Option<Vec<usize>>,
    pub assignment_cost: f64,
    pub schedule: ScheduleInfo,
    pub params: Vec<ParamEntry>,
}

/// Everything needed to resume training or sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub state: ModelState,
    pub optimizer: AdamW,
    pub assignment: Option<Assignment>,
}

fn push_f64s(buf: &mut Vec<u8>, vals: impl Iterator<Item = f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let net = trainer.network();
    let header = Header {
        format: FORMAT_VERSION.into(),
        build: crate::BUILD_VERSION.into(),
        config: trainer.config.clone(),
        step: trainer.step,
        adam_step: trainer.optimizer.step,
        assignment: trainer.assignment.as_ref().map(|a| a.perm().to_vec()),
        assignment_cost: trainer.assignment.as_ref().map_or(0.0, |a| a.cost),
        schedule: ScheduleInfo {
            steps: trainer.schedule.total_steps(),
            cosine_offset: trainer.schedule.offset(),
        },
        params: net
            .layout()
            .specs()
            .iter()
            .map(|s| ParamEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let numel = trainer.state.params.numel();
    let mut buf = Vec::with_capacity(16 + json.len() + 32 * numel);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    push_f64s(&mut buf, trainer.state.params.flat().into_iter());
    push_f64s(&mut buf, trainer.state.ema.flat().into_iter());
    push_f64s(&mut buf, trainer.optimizer.m.iter().flatten().copied());
    push_f64s(&mut buf, trainer.optimizer.v.iter().flatten().copied());
    Ok(buf)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(trainer)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Parse only the header (no payload validation).
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(format!("header of {len} bytes exceeds file size {}", bytes.len())))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(format!("malformed header: {e}")))?;
    let format = value.get("format").and_then(|v| v.as_str()).unwrap_or("<none>");
    if format != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: format.to_owned(),
            expected: FORMAT_VERSION.to_owned(),
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| corrupt(format!("malformed header: {e}")))?;
    Ok((header, end))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = read_header(bytes)?;
    let network = Network::new(header.config.effective_model())?;
    let layout = network.layout();
    if layout.len() != header.params.len()
        || layout
            .specs()
            .iter()
            .zip(&header.params)
            .any(|(s, p)| s.name != p.name || s.shape != p.shape)
    {
        return Err(corrupt("parameter list does not match the declared model config"));
    }
    let numel = layout.numel();
    let expected = start + 4 * numel * 8;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, expected {} (truncated or padded file)",
            bytes.len() - start,
            expected - start
        )));
    }
    let mut vals = bytes[start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_store = || -> Result<ParamStore> {
        let tensors = layout
            .specs()
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                Tensor::new(s.shape.clone(), vals.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        ParamStore::from_tensors(layout, tensors)
    };
    let params = read_store()?;
    let ema = read_store()?;
    let m = read_store()?;
    let v = read_store()?;
    let mut optimizer = AdamW::new(header.config.adam, &params);
    optimizer.step = header.adam_step;
    optimizer.m = m.tensors().iter().map(|t| t.data().to_vec()).collect();
    optimizer.v = v.tensors().iter().map(|t| t.data().to_vec()).collect();
    let assignment = match &header.assignment {
        Some(p) => Some(Assignment::new(p.clone(), header.assignment_cost)?),
        None => None,
    };
    Ok(Checkpoint {
        state: ModelState { network, params, ema },
        optimizer,
        assignment,
        header,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

impl Trainer {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save(self, path)
    }

    /// Resume from a checkpoint; continuing reproduces the metrics of an
    /// uninterrupted run.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let Checkpoint {
            header,
            state,
            optimizer,
            assignment,
        } = ck;
        Trainer::assemble(header.config, state, optimizer, assignment, header.step)
    }
}
