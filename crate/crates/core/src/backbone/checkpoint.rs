//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PPTCKPT\0"            magic
//! u32                     format version
//! u64                     manifest length in bytes
//! [u8]                    manifest, UTF-8 JSON
//! repeated per parameter, in manifest order:
//!   u32 name length, [u8] name, u64 value count, [f32] values
//! ```
//!
//! A pretty-printed copy of the manifest is written next to the checkpoint
//! as `<file>.manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PPTCKPT\0";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Which training stage produced a set of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    NextPosition,
    #[serde(rename = "II")]
    Destination,
    #[serde(rename = "III-dest")]
    DestinationPredictor,
    #[serde(rename = "III-traj")]
    TrajectoryPredictor,
}

impl Stage {
    pub fn file_stem(self) -> &'static str {
        match self {
            Stage::NextPosition => "stage1",
            Stage::Destination => "stage2",
            Stage::DestinationPredictor => "stage3_dest",
            Stage::TrajectoryPredictor => "stage3_traj",
        }
    }

    /// `<dir>/<file_stem>.ckpt`
    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.ckpt", self.file_stem()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::NextPosition => "I",
            Stage::Destination => "II",
            Stage::DestinationPredictor => "III-dest",
            Stage::TrajectoryPredictor => "III-traj",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: Stage,
    encoder: EncoderConfig,
    config_hash: String,
    seed: u64,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
    params: Vec<ParamEntry>,
}

/// Parameters plus training provenance.
#[derive(Debug, Clone)]
pub struct StageCheckpoint {
    pub stage: Stage,
    pub params: EncoderParams,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl StageCheckpoint {
    fn manifest(&self) -> Manifest {
        Manifest {
            format_version: CHECKPOINT_VERSION,
            stage: self.stage,
            encoder: self.params.config.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| ParamEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(manifest.len() + 4 * self.params.num_scalars() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (name, t) in self.params.named() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u64()? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
        if manifest.format_version != version {
            return Err(CheckpointError::Corrupt(
                "manifest version disagrees with header".into(),
            ));
        }
        let mut params = EncoderParams::init(&manifest.encoder, 0)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != manifest.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} parameters, manifest lists {}",
                expected.len(),
                manifest.params.len()
            )));
        }
        for (((name, shape), entry), slot) in expected
            .iter()
            .zip(&manifest.params)
            .zip(params.tensors_mut())
        {
            if *name != entry.name || *shape != entry.shape {
                return Err(CheckpointError::Corrupt(format!(
                    "manifest entry {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let name_len = r.u32()? as usize;
            let stored = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            if stored != name {
                return Err(CheckpointError::Corrupt(format!(
                    "array {stored} found where {name} was expected"
                )));
            }
            let count = r.u64()? as usize;
            if count != shape.iter().product::<usize>() {
                return Err(CheckpointError::Corrupt(format!(
                    "{name}: wrong value count {count}"
                )));
            }
            let data = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            *slot = Tensor::param(data, shape).expect("validated shape");
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            stage: manifest.stage,
            params,
            config_hash: manifest.config_hash,
            seed: manifest.seed,
            epoch: manifest.epoch,
            metrics: manifest.metrics,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::write(path, self.to_bytes()).map_err(io)?;
        let pretty = serde_json::to_string_pretty(&self.manifest())?;
        let sidecar = Self::sidecar_path(path);
        std::fs::write(&sidecar, pretty + "\n").map_err(|source| CheckpointError::Io {
            path: sidecar.clone(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&buf)
    }
}
