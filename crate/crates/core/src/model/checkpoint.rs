//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "MDFL" | u32 version | u64 n | n bytes UTF-8 JSON metadata
//!        | 3 x (u64 len | len x f64)   parameters, Adam m, Adam v
//!        | u64 CRC-64/ECMA-182 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};

use super::{AdamState, ModFlowModel, ModelError, TrainState};
use crate::egnn::EgnnParams;
use crate::graph::{AtomAlphabet, ClusterVocabulary};
use crate::ode::SolverConfig;

const MAGIC: &[u8; 4] = b"MDFL";
pub const CHECKPOINT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

/// A model together with its optimizer state and the run configuration
/// that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModFlowModel,
    pub state: TrainState,
    pub config_echo: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    k: usize,
    bonds: usize,
    width: usize,
    atoms: AtomAlphabet,
    vocab: Option<ClusterVocabulary>,
    solver: SolverConfig,
    eps: f64,
    dim: usize,
    adam_step: u64,
    epoch: usize,
    config: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.model.params();
        let meta = Meta {
            k: p.k(),
            bonds: p.bonds(),
            width: p.width(),
            atoms: self.model.atoms().clone(),
            vocab: self.model.vocab().cloned(),
            solver: self.model.solver,
            eps: self.model.eps,
            dim: self.model.dim,
            adam_step: self.state.adam.step,
            epoch: self.state.epoch,
            config: self.config_echo.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for arr in [p.as_slice(), &self.state.adam.m, &self.state.adam.v] {
            out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            for v in arr {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(ModelError::Format("missing MDFL magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(ModelError::ChecksumMismatch);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if CRC64.checksum(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(ModelError::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, at: 8 };
        let n = r.len()?;
        let meta: Meta = serde_json::from_slice(r.take(n)?)
            .map_err(|e| ModelError::Format(format!("metadata: {e}")))?;
        let params = r.array()?;
        let m = r.array()?;
        let v = r.array()?;
        if r.at != body.len() {
            return Err(ModelError::Format("trailing bytes after arrays".into()));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(ModelError::Format("optimizer moments do not match parameters".into()));
        }
        let params = EgnnParams::from_vec(meta.k, meta.bonds, meta.width, params)
            .ok_or_else(|| ModelError::Format("parameter count does not match shape".into()))?;
        let model = ModFlowModel::new(meta.atoms, meta.vocab, params, meta.solver, meta.eps, meta.dim)?;
        Ok(Self {
            model,
            state: TrainState {
                adam: AdamState {
                    m,
                    v,
                    step: meta.adam_step,
                },
                epoch: meta.epoch,
            },
            config_echo: meta.config,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize, ModelError> {
        let raw = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(raw).map_err(|_| ModelError::Format("length overflow".into()))
    }

    fn array(&mut self) -> Result<Vec<f64>, ModelError> {
        let n = self.len()?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| ModelError::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
