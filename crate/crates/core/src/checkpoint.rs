//! Checkpoint directories: `manifest.json` plus one `.tns` file per tensor.
//!
//! ```text
//! ckpt/manifest.json
//! ckpt/weights/<name>.tns
//! ckpt/optim/m/<name>.tns
//! ckpt/optim/v/<name>.tns
//! ```
//!
//! Every file is listed in the manifest with its CRC-32 and verified on load.
//! Writes go to a sibling temp directory that replaces the old one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::tensor::{DType, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub file: String,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub adamw: AdamWConfig,
    pub config_hash: u32,
    pub config: String,
    /// Shuffling and augmentation draw from a stream derived from the run
    /// seed and the epoch index, so the seed is the whole RNG state.
    pub rng_seed: u64,
    pub encoder_checksum: u32,
    pub weights: Vec<FileEntry>,
    pub first_moments: Vec<FileEntry>,
    pub second_moments: Vec<FileEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

fn write_group<'a>(dir: &Path, sub: &str, items: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Result<Vec<FileEntry>> {
    let d = dir.join(sub);
    fs::create_dir_all(&d)?;
    items
        .map(|(name, t)| {
            let bytes = t.to_tns_bytes(DType::F64);
            let file = format!("{sub}/{name}.tns");
            fs::write(dir.join(&file), &bytes)?;
            Ok(FileEntry { name: name.clone(), file, crc32: crc32fast::hash(&bytes) })
        })
        .collect()
}

fn read_entry(dir: &Path, e: &FileEntry) -> Result<Tensor> {
    let path = dir.join(&e.file);
    let bytes = fs::read(&path)?;
    if crc32fast::hash(&bytes) != e.crc32 {
        return Err(Error::Checksum(path));
    }
    Tensor::from_tns_bytes(&bytes)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let tmp = tmp_sibling(dir);
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let manifest = Manifest {
            format: FORMAT_VERSION,
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            adamw: self.optimizer.cfg,
            config_hash: self.config.hash(),
            config: self.config.to_text(),
            rng_seed: self.config.seed,
            encoder_checksum: encoder::checksum(&self.store),
            weights: write_group(&tmp, "weights", self.store.iter())?,
            first_moments: write_group(&tmp, "optim/m", self.optimizer.m.iter())?,
            second_moments: write_group(&tmp, "optim/v", self.optimizer.v.iter())?,
        };
        fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint format {} unsupported", m.format)));
        }
        let config = RunConfig::from_text(&m.config, &[])?;
        if config.hash() != m.config_hash {
            return Err(Error::Format("checkpoint config does not match its hash".into()));
        }
        let mut store = ParamStore::new();
        for e in &m.weights {
            store.insert(e.name.clone(), read_entry(dir, e)?);
        }
        let mut optimizer = OptimizerState::new(m.adamw);
        optimizer.step = m.optimizer_step;
        for e in &m.first_moments {
            optimizer.m.insert(e.name.clone(), read_entry(dir, e)?);
        }
        for e in &m.second_moments {
            optimizer.v.insert(e.name.clone(), read_entry(dir, e)?);
        }
        if encoder::checksum(&store) != m.encoder_checksum {
            return Err(Error::Checksum(dir.join("weights")));
        }
        Ok(Self { config, store, optimizer, epoch: m.epoch })
    }
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    dir.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::desk();
        config.model.encoder.depth = 1;
        let store = model::init(&config.model, 3).unwrap();
        let mut optimizer = OptimizerState::new(AdamWConfig::default());
        optimizer.step = 7;
        for (n, t) in store.iter().filter(|(n, _)| n.starts_with("head.")) {
            optimizer.m.insert(n.clone(), t.map(|v| v * 0.5));
            optimizer.v.insert(n.clone(), t.map(|v| v * v));
        }
        Checkpoint { config, store, optimizer, epoch: 4 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let c = sample();
        c.save(&path).unwrap();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.store, c.store);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.config, c.config);
        assert_eq!(back.epoch, 4);
        assert!(!tmp_sibling(&path).exists());
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        sample().save(&path).unwrap();
        let f = path.join("weights/head.cls.bias.tns");
        let mut bytes = fs::read(&f).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checksum(_))));
    }
}
