//! Self-describing checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 metadata length, a JSON
//! metadata block (stage, seed, architecture, config snapshot, optional
//! modulator snapshot, tensor manifest), then the raw little-endian `f64`
//! tensor data in manifest order. The writer is deterministic, so
//! save -> load -> save produces byte-identical files.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::ArchDescriptor;

const MAGIC: &[u8; 8] = b"SEMCKPT\x01";

/// Which training stage produced the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Analog,
    Digital,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    stage: Stage,
    /// Scheme tag assigned at train time (analog, ste-direct, ...).
    scheme: String,
    seed: u64,
    arch: ArchDescriptor,
    /// Resolved training-config snapshot.
    train_config: serde_json::Value,
    /// Modulator snapshot for digital checkpoints (opaque at this layer).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modulator: Option<serde_json::Value>,
    tensors: Vec<TensorInfo>,
}

/// In-memory checkpoint: metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub scheme: String,
    pub seed: u64,
    pub arch: ArchDescriptor,
    pub train_config: serde_json::Value,
    pub modulator: Option<serde_json::Value>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageMismatch(format!(
                "checkpoint stage is {:?}, operation needs {:?}",
                self.stage, stage
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            format_version: 1,
            stage: self.stage,
            scheme: self.scheme.clone(),
            seed: self.seed,
            arch: self.arch.clone(),
            train_config: self.train_config.clone(),
            modulator: self.modulator.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let meta_bytes = serde_json::to_vec(&meta)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&meta_bytes)?;
        for (_, t) in &self.tensors {
            let slice = t.as_slice().expect("tensors stored contiguously");
            let mut buf = Vec::with_capacity(slice.len() * 8);
            for v in slice {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&buf)?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Malformed {
            path: path.display().to_string(),
            reason,
        };
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|e| bad(format!("truncated header: {e}")))?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|e| bad(format!("truncated length: {e}")))?;
        let meta_len = u64::from_le_bytes(len_bytes) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        file.read_exact(&mut meta_bytes)
            .map_err(|e| bad(format!("truncated metadata: {e}")))?;
        let meta: Meta =
            serde_json::from_slice(&meta_bytes).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.format_version != 1 {
            return Err(bad(format!("unsupported version {}", meta.format_version)));
        }
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for info in &meta.tensors {
            let n: usize = info.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            file.read_exact(&mut buf)
                .map_err(|e| bad(format!("truncated tensor {}: {e}", info.name)))?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&info.shape), data)
                .map_err(|e| bad(format!("tensor {} shape: {e}", info.name)))?;
            tensors.push((info.name.clone(), arr));
        }
        Ok(Self {
            stage: meta.stage,
            scheme: meta.scheme,
            seed: meta.seed,
            arch: meta.arch,
            train_config: meta.train_config,
            modulator: meta.modulator,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample_checkpoint() -> Checkpoint {
        let mut a = ArrayD::zeros(IxDyn(&[3, 4]));
        for (i, v) in a.iter_mut().enumerate() {
            *v = (i as f64 + 0.5) / 3.0;
        }
        let b = ArrayD::from_elem(IxDyn(&[5]), std::f64::consts::PI);
        Checkpoint {
            stage: Stage::Analog,
            scheme: "analog".into(),
            seed: 17,
            arch: ArchDescriptor::default(),
            train_config: serde_json::json!({"epochs": 3, "lr": 1e-3}),
            modulator: None,
            tensors: vec![("a".into(), a), ("b".into(), b)],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(loaded.seed, 17);
        assert_eq!(loaded.stage, Stage::Analog);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(n1, n2);
            for (x, y) in t1.iter().zip(t2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn stage_gate_rejects_mismatch() {
        let ck = sample_checkpoint();
        assert!(ck.require_stage(Stage::Analog).is_ok());
        let err = ck.require_stage(Stage::Digital).unwrap_err();
        assert_eq!(err.class(), "stage-mismatch");
    }

    #[test]
    fn corrupt_magic_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert_eq!(err.class(), "malformed-file");
    }
}
