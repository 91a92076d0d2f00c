//! Binary checkpoint format.
//!
//! ```text
//! "MXCK" | version: u32 LE | header length: u32 LE | JSON header
//!        | parameters: f64 LE x n | (Adam m: f64 x n | Adam v: f64 x n)?
//! ```
//!
//! Values are stored bit-exactly, so a save/load round trip reproduces
//! training state exactly.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::write_atomic;
use crate::model::{ModelConfig, ModelParameters};
use crate::optim::AdamState;
use crate::training::{Method, TrainState};

pub const MAGIC: &[u8; 4] = b"MXCK";
pub const VERSION: u32 = 1;

/// Training progress saved alongside the parameters for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub method: Option<Method>,
    pub optimizer: Option<AdamState>,
    pub progress: Option<Progress>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    method: Option<Method>,
    step: u64,
    /// Parameter names and shapes in storage order.
    tensors: Vec<(String, Vec<usize>)>,
    n_values: usize,
    adam_t: Option<u64>,
    progress: Option<Progress>,
}

impl Checkpoint {
    pub fn from_params(params: ModelParameters) -> Self {
        Self {
            params,
            method: None,
            optimizer: None,
            progress: None,
        }
    }

    /// Full training state, for resuming.
    pub fn from_state(state: &TrainState, method: Method) -> Self {
        Self {
            params: state.params.clone(),
            method: Some(method),
            optimizer: Some(state.adam.clone()),
            progress: Some(Progress {
                epoch: state.epoch,
                best_val: state.best_val,
                best_epoch: state.best_epoch,
                bad_epochs: state.bad_epochs,
                rng: state.rng.clone(),
            }),
        }
    }

    /// Rebuilds a training state. Fails if the checkpoint holds parameters
    /// only.
    pub fn into_state(self) -> Result<TrainState> {
        let (Some(adam), Some(p)) = (self.optimizer, self.progress) else {
            return Err(Error::Checkpoint("checkpoint has no optimizer state to resume from".into()));
        };
        let mut state = TrainState::from_parts(self.params, p.rng);
        state.adam = adam;
        state.epoch = p.epoch;
        state.best_val = p.best_val;
        state.best_epoch = p.best_epoch;
        state.bad_epochs = p.bad_epochs;
        Ok(state)
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        model: *ck.params.config(),
        method: ck.method,
        step: ck.params.step,
        tensors: ck
            .params
            .layout()
            .specs()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect(),
        n_values: ck.params.len(),
        adam_t: ck.optimizer.as_ref().map(|a| a.t),
        progress: ck.progress.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n = ck.params.len();
    let mut out = Vec::with_capacity(12 + json.len() + n * 8 * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    push_f64s(&mut out, ck.params.values());
    if let Some(adam) = &ck.optimizer {
        push_f64s(&mut out, &adam.m);
        push_f64s(&mut out, &adam.v);
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| bad("truncated preamble"))
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Parses a checkpoint, checking the header against the parameter layout
/// the model configuration implies.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.get(..4) != Some(&MAGIC[..]) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
    let body = &bytes[12 + header_len..];
    let n = header.n_values;
    let blocks = if header.adam_t.is_some() { 3 } else { 1 };
    if n.checked_mul(8 * blocks) != Some(body.len()) {
        return Err(bad(format!(
            "body holds {} bytes, expected {blocks} x {n} f64 values",
            body.len()
        )));
    }
    header.model.validate().map_err(|e| bad(format!("model config: {e}")))?;
    let template = crate::model::Layout::new(&header.model);
    if template.total() != n {
        return Err(bad(format!("header lists {n} values, model needs {}", template.total())));
    }
    let expected: Vec<(&str, &[usize])> = template.specs().iter().map(|s| (s.name.as_str(), &s.shape[..])).collect();
    let found: Vec<(&str, &[usize])> = header.tensors.iter().map(|(a, b)| (a.as_str(), &b[..])).collect();
    if expected != found {
        return Err(bad("tensor names or shapes do not match the model configuration"));
    }
    if let Some(m) = header.method {
        if m.n_outputs() != header.model.n_outputs {
            return Err(bad(format!("{m} checkpoint with {} outputs", header.model.n_outputs)));
        }
    }
    let values = read_f64s(&body[..n * 8]);
    let params = ModelParameters::from_values(header.model, values, header.step)?;
    params.check_finite().map_err(|e| bad(e.to_string()))?;
    let optimizer = header.adam_t.map(|t| AdamState {
        m: read_f64s(&body[n * 8..2 * n * 8]),
        v: read_f64s(&body[2 * n * 8..]),
        t,
    });
    if let Some(a) = &optimizer {
        if a.m.iter().any(|x| !x.is_finite()) || a.v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(bad("optimizer moments are non-finite or negative"));
        }
    }
    Ok(Checkpoint {
        params,
        method: header.method,
        optimizer,
        progress: header.progress,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
