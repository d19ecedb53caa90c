//! Versioned binary checkpoints.
//!
//! Layout: the magic `MVMCCKPT`, a little-endian `u32` version, a `u64`
//! length and a JSON header, a `u64` count and that many little-endian
//! `f64` values, then the SHA-256 of every preceding byte. Large arrays
//! live in the `f64` payload and are listed by name in the header, so the
//! floating-point state round-trips bit for bit.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lattice::SimulationCell;
use crate::optimizer::{SpringConfig, SpringState};
use crate::sampler::StepSize;
use crate::vmc::{Vmc, WalkerSnapshot};

pub const MAGIC: &[u8; 8] = b"MVMCCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected}); convert it with the matching release")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Integrity,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match this run: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration as written by the runner.
    pub config: String,
    pub cell: SimulationCell,
    pub params: Vec<f64>,
    pub spring: SpringState,
    pub spring_config: SpringConfig,
    pub step_size: StepSize,
    pub recovered: bool,
    /// Training samples seen and flagged so far.
    pub flag_counts: (u64, u64),
    pub walkers: Vec<WalkerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorEntry>,
    config: String,
    cell: SimulationCell,
    spring_step: u64,
    spring_lambda_boost: f64,
    spring_config: SpringConfig,
    step_size: StepSize,
    recovered: bool,
    flag_counts: (u64, u64),
    n_electrons: usize,
    rngs: Vec<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn capture(vmc: &Vmc<'_>, config: &str) -> Checkpoint {
        Checkpoint {
            config: config.to_string(),
            cell: vmc.ansatz.cell.clone(),
            params: vmc.params.clone(),
            spring: vmc.spring.clone(),
            spring_config: vmc.spring_config.clone(),
            step_size: vmc.step_size.clone(),
            recovered: vmc.recovered,
            flag_counts: (vmc.samples_seen, vmc.samples_flagged),
            walkers: vmc.walker_snapshots(),
        }
    }

    /// Loads this state into `vmc`, which must describe the same system and walker count.
    pub fn restore(&self, vmc: &mut Vmc<'_>) -> Result<(), CheckpointError> {
        if self.cell != vmc.ansatz.cell {
            return Err(CheckpointError::Mismatch("simulation cell differs".into()));
        }
        if self.params.len() != vmc.ansatz.n_params() {
            return Err(CheckpointError::Mismatch(format!(
                "{} parameters stored, ansatz has {}",
                self.params.len(),
                vmc.ansatz.n_params()
            )));
        }
        if self.walkers.len() != vmc.sampler.n_walkers {
            return Err(CheckpointError::Mismatch(format!(
                "{} walkers stored, run is configured for {}",
                self.walkers.len(),
                vmc.sampler.n_walkers
            )));
        }
        vmc.params = self.params.clone();
        vmc.spring = self.spring.clone();
        vmc.spring_config = self.spring_config.clone();
        vmc.step_size = self.step_size.clone();
        vmc.recovered = self.recovered;
        (vmc.samples_seen, vmc.samples_flagged) = self.flag_counts;
        vmc.set_walkers(&self.walkers).map_err(|e| CheckpointError::Mismatch(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n_e = self.walkers.first().map_or(0, |w| w.x.len());
        let positions: Vec<f64> = self.walkers.iter().flat_map(|w| w.x.iter().flat_map(|r| *r)).collect();
        let tensors = [("params", &self.params), ("spring.prev_update", &self.spring.prev_update), ("walkers.x", &positions)];
        let header = Header {
            tensors: tensors.iter().map(|(n, v)| TensorEntry { name: n.to_string(), len: v.len() }).collect(),
            config: self.config.clone(),
            cell: self.cell.clone(),
            spring_step: self.spring.step,
            spring_lambda_boost: self.spring.lambda_boost,
            spring_config: self.spring_config.clone(),
            step_size: self.step_size.clone(),
            recovered: self.recovered,
            flag_counts: self.flag_counts,
            n_electrons: n_e,
            rngs: self.walkers.iter().map(|w| w.rng.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = tensors.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 16 + json.len() + 8 * total + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(total as u64).to_le_bytes());
        for (_, v) in tensors {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let hlen = r.u64()? as usize;
        let json = r.take(hlen)?;
        let count = r.u64()? as usize;
        let payload = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let body_end = r.pos;
        let digest = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(CheckpointError::Integrity);
        }
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tensors = std::collections::HashMap::new();
        let mut off = 0;
        for t in &header.tensors {
            let end = off + t.len;
            if end > values.len() {
                return Err(CheckpointError::Format(format!("tensor {} overruns the payload", t.name)));
            }
            tensors.insert(t.name.as_str(), &values[off..end]);
            off = end;
        }
        if off != values.len() {
            return Err(CheckpointError::Format("payload length disagrees with the tensor table".into()));
        }
        let get = |name: &str| {
            tensors.get(name).map(|v| v.to_vec()).ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))
        };
        let positions = get("walkers.x")?;
        let n_w = header.rngs.len();
        if positions.len() != n_w * header.n_electrons * 2 {
            return Err(CheckpointError::Format("walker positions do not match walker count".into()));
        }
        let walkers = header
            .rngs
            .into_iter()
            .enumerate()
            .map(|(w, rng)| {
                let s = &positions[w * header.n_electrons * 2..(w + 1) * header.n_electrons * 2];
                WalkerSnapshot { x: s.chunks_exact(2).map(|c| [c[0], c[1]]).collect(), rng }
            })
            .collect();
        Ok(Checkpoint {
            config: header.config,
            cell: header.cell,
            params: get("params")?,
            spring: SpringState {
                prev_update: get("spring.prev_update")?,
                step: header.spring_step,
                lambda_boost: header.spring_lambda_boost,
            },
            spring_config: header.spring_config,
            step_size: header.step_size,
            recovered: header.recovered,
            flag_counts: header.flag_counts,
            walkers,
        })
    }

    /// Writes to a temporary file in the target directory and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<(), CheckpointError> {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| CheckpointError::Io(e.error))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
