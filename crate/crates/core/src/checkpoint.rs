//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `TPSMKCKP` |
//! | 4     | format version (`u32`, currently 1) |
//! | 8     | metadata length `n` (`u64`) |
//! | n     | UTF-8 JSON metadata ([`CheckpointMeta`]) |
//! | 8     | parameter count `p` (`u64`) |
//! | 8·p   | parameters as `f64`, in [`Architecture::shapes`] order, row-major |
//!
//! Readers reject unknown versions, trailing bytes, and parameter counts
//! that disagree with the architecture.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Architecture, EncoderParams};
use crate::error::{Error, Result};
use crate::pruner::PruneReport;

pub const MAGIC: &[u8; 8] = b"TPSMKCKP";
pub const VERSION: u32 = 1;

/// Pruning outcome stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    /// `(learned landmark index, importance)` in removal order.
    pub removal_order: Vec<(usize, f64)>,
    /// Learned indices kept, ascending.
    pub surviving: Vec<usize>,
    /// Mean registration loss before each removal, then the final loss.
    pub losses: Vec<f64>,
}

impl From<&PruneReport> for PruneRecord {
    fn from(r: &PruneReport) -> Self {
        Self {
            removal_order: r.removal_order(),
            surviving: r.surviving.clone(),
            losses: r.baselines(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    /// Corner anchors appended after the learned landmarks.
    pub anchors: usize,
    #[serde(default)]
    pub prune: Option<PruneRecord>,
    /// Free-form training metadata (configuration keys, best epoch, ...).
    #[serde(default)]
    pub training: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn new(params: EncoderParams, anchors: usize) -> Self {
        Self {
            meta: CheckpointMeta {
                arch: params.arch().clone(),
                anchors,
                prune: None,
                training: BTreeMap::new(),
            },
            params,
        }
    }

    /// Learned landmark indices in use: the pruning survivors, or all.
    pub fn active(&self) -> Vec<usize> {
        match &self.meta.prune {
            Some(p) => p.surviving.clone(),
            None => (0..self.meta.arch.landmarks).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        let flat = self.params.flat();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u64(&mut r)?;
        let mut meta = vec![0u8; usize::try_from(meta_len).map_err(|_| Error::Format("metadata too large".into()))?];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        meta.arch.validate()?;
        let count = read_u64(&mut r)? as usize;
        let expected: usize = meta.arch.shapes().iter().map(|s| s.iter().product::<usize>()).sum();
        if count != expected {
            return Err(Error::Format(format!("checkpoint holds {count} parameters, architecture needs {expected}")));
        }
        let mut flat = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut b)?;
            flat.push(f64::from_le_bytes(b));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        if let Some(p) = &meta.prune {
            if p.surviving.iter().any(|&i| i >= meta.arch.landmarks) {
                return Err(Error::Format("pruning record names a missing landmark".into()));
            }
        }
        let params = EncoderParams::from_flat(meta.arch.clone(), &flat)?;
        Ok(Self { meta, params })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let file = fs::File::create(&tmp)?;
            self.write_to(std::io::BufWriter::new(file))?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
