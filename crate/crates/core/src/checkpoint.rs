//! `MCW2VCK1` checkpoints: magic, little-endian u64 metadata length, JSON
//! metadata, then every parameter as little-endian f32 in metadata order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dsp::FeatureStats;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCW2VCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// "pretrain" or "finetune".
    pub phase: String,
    pub step: usize,
    pub params: Vec<ParamInfo>,
    pub norm: FeatureStats,
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(phase: &str, step: usize, store: ParamStore<f32>, norm: FeatureStats, config: &RunConfig) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| ParamInfo {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                phase: phase.into(),
                step,
                params,
                norm,
                config_hash: config.hash(),
                config: config.clone(),
            },
            store,
        }
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        let json = serde_json::to_vec(&self.meta)?;
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, _, t) in self.store.iter() {
            for x in t.data() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let bad = |reason: &str| Error::Format {
            what: "checkpoint",
            reason: reason.into(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", meta.version)));
        }
        let mut store = ParamStore::new();
        for p in &meta.params {
            let n: usize = p.shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes).map_err(io)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(p.name.clone(), Tensor::new(data, p.shape.clone())?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Copies stored values into `store` by name, checking shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (_, name, t) in self.store.iter() {
            let id = store
                .id(name)
                .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::shape("restore_into", dst.shape(), t.shape()));
            }
            *dst = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.insert("encoder.w", Tensor::new(vec![1.0, -2.5, 3.25, 0.0], vec![2, 2]).unwrap());
        store.insert("head.b", Tensor::new(vec![7.0], vec![1]).unwrap());
        Checkpoint::new("pretrain", 12, store, FeatureStats::identity(3), &RunConfig::desk())
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta, ck.meta);
        let names: Vec<_> = back.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let orig: Vec<_> = ck.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(names, orig);
    }

    #[test]
    fn corruption_detected() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read(&mut bad.as_slice()), Err(Error::Format { .. })));
        let truncated = &buf[..buf.len() - 2];
        assert!(Checkpoint::read(&mut &truncated[..]).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(Checkpoint::read(&mut extra.as_slice()).is_err());
    }
}
