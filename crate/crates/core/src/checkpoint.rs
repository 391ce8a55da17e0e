//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `meta.json` (configs, epoch,
//! validation loss, depths, loss label) plus tensor archives for the
//! parameters (`tensors.bin`) and optimizer moments (`optim.bin`).
//!
//! The archive format is a JSON index (name, shape, offset) followed by
//! raw little-endian `f64` data, so save -> load round-trips are
//! bit-exact.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::LossConfig;
use crate::trainer::{OptimState, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Writes named tensors as an index header plus raw f64 data.
pub fn write_archive(path: &Path, tensors: &BTreeMap<String, Arr>) -> Result<()> {
    let mut index = Vec::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        index.push(ArchiveEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() as u64;
    }
    let header = serde_json::to_vec(&index)
        .map_err(|e| Error::Checkpoint(format!("archive header: {e}")))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for t in tensors.values() {
        for v in t.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads an archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<BTreeMap<String, Arr>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let index: Vec<ArchiveEntry> = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("archive header: {e}")))?;
    let mut out = BTreeMap::new();
    for entry in index {
        let count: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            f.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        out.insert(entry.name, arr);
    }
    Ok(out)
}

/// Structured-text checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub depths: (usize, usize),
    pub loss_label: String,
    pub init_seed: u64,
    pub optimizer_step: usize,
}

/// A full training snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimState,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub depths: (usize, usize),
    pub loss_label: String,
}

/// Persists a checkpoint directory.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        model: ckpt.params.config.clone(),
        loss: ckpt.loss.clone(),
        train: ckpt.train.clone(),
        epoch: ckpt.epoch,
        val_loss: ckpt.val_loss,
        depths: ckpt.depths,
        loss_label: ckpt.loss_label.clone(),
        init_seed: ckpt.params.init_seed,
        optimizer_step: ckpt.optimizer.step,
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    std::fs::write(dir.join("meta.json"), meta_json)?;
    write_archive(&dir.join("tensors.bin"), &ckpt.params.tensors)?;
    write_archive(&dir.join("optim.bin"), &ckpt.optimizer.to_tensors())?;
    Ok(())
}

/// Loads a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_json = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_json)
        .map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    let tensors = read_archive(&dir.join("tensors.bin"))?;
    let params = ModelParams::from_tensors(meta.model.clone(), tensors, meta.init_seed)?;
    let optim_tensors = read_archive(&dir.join("optim.bin"))?;
    let optimizer = OptimState::from_tensors(optim_tensors, meta.optimizer_step, &params)?;
    Ok(Checkpoint {
        params,
        optimizer,
        loss: meta.loss,
        train: meta.train,
        epoch: meta.epoch,
        val_loss: meta.val_loss,
        depths: meta.depths,
        loss_label: meta.loss_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let params = init_model(&small_cfg(), 5).unwrap();
        let dir = std::env::temp_dir().join(format!("ckpt_arch_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bin");
        write_archive(&path, &params.tensors).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(params.tensors.len(), back.len());
        for (name, t) in &params.tensors {
            let b = &back[name];
            assert_eq!(t.shape(), b.shape());
            for (x, y) in t.iter().zip(b.iter()) {
                assert!(x.to_bits() == y.to_bits(), "{name} not bit-exact");
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::tiny(2);
        cfg.d = 4;
        cfg.heads = 2;
        cfg.ffn_expansion = 1.0;
        cfg.stft = crate::dsp::StftConfig::new(16, 8);
        cfg
    }
}
