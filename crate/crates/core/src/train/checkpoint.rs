//! Checkpoint directory: `manifest.json` plus a contiguous `params.bin` of
//! little-endian f64 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::error::{Result, TensorError};
use crate::losses::DistillConfig;
use crate::nn::{Classifier, ModelConfig, Role};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the data stream when the checkpoint was taken.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: Option<DistillConfig>,
    pub epoch: usize,
    pub rng: RngState,
    pub metrics: Option<EpochMetrics>,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    role: Role,
    model: ModelConfig,
    train: TrainConfig,
    distill: Option<DistillConfig>,
    epoch: usize,
    rng: RngState,
    metrics: Option<EpochMetrics>,
    tensors: Vec<TensorEntry>,
    total_bytes: usize,
}

fn io(path: &Path, e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    /// Rebuild the network this checkpoint belongs to.
    pub fn classifier(&self) -> Classifier {
        Classifier::new(&self.model, self.role, self.train.word_boundary, 0).0
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut blob = Vec::with_capacity(self.params.numel() * 8);
        let mut tensors = Vec::new();
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            role: self.role,
            model: self.model.clone(),
            train: self.train.clone(),
            distill: self.distill.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            metrics: self.metrics.clone(),
            tensors,
            total_bytes: blob.len(),
        };
        let bin = dir.join("params.bin");
        fs::write(&bin, &blob).map_err(|e| io(&bin, e))?;
        let mpath = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| io(&mpath, e))?;
        fs::write(&mpath, text).map_err(|e| io(&mpath, e))
    }

    /// Load and verify a checkpoint. Nothing is returned unless every check passes.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| io(&mpath, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| io(&mpath, e))?;
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(TensorError::Invalid(format!(
                "{}: checkpoint version {version:?}, expected {CHECKPOINT_VERSION}",
                mpath.display()
            )));
        }
        let m: Manifest = serde_json::from_value(raw).map_err(|e| io(&mpath, e))?;
        let bin = dir.join("params.bin");
        let blob = fs::read(&bin).map_err(|e| io(&bin, e))?;
        if blob.len() != m.total_bytes {
            return Err(io(&bin, format!("{} bytes, manifest says {}", blob.len(), m.total_bytes)));
        }
        let mut named = Vec::with_capacity(m.tensors.len());
        let mut expect = 0;
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expect || e.offset + n * 8 > blob.len() {
                return Err(io(&bin, format!("tensor {} has a bad offset", e.name)));
            }
            let data = blob[e.offset..e.offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expect = e.offset + n * 8;
        }
        if expect != blob.len() {
            return Err(io(&bin, "trailing bytes after the last tensor"));
        }
        m.model.validate().map_err(TensorError::Invalid)?;
        let (_, mut params) = Classifier::new(&m.model, m.role, m.train.word_boundary, 0);
        params.assign(&named).map_err(|e| io(&mpath, e))?;
        Ok(Self {
            role: m.role,
            model: m.model,
            train: m.train,
            distill: m.distill,
            epoch: m.epoch,
            rng: m.rng,
            metrics: m.metrics,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let model = ModelConfig {
            hidden: 3,
            gru_layers: 1,
            audio_widths: vec![4],
            audio_embed: 4,
            num_classes: 4,
            ..Default::default()
        };
        let (_, params) = Classifier::new(&model, Role::Teacher, false, 11);
        Checkpoint {
            role: Role::Teacher,
            model,
            train: TrainConfig::default(),
            distill: None,
            epoch: 3,
            rng: RngState { seed: 11, word_pos: "1234".into() },
            metrics: None,
            params,
        }
    }

    #[test]
    fn save_load_save_is_bitwise() {
        let ck = tiny();
        let d1 = tempfile::tempdir().unwrap();
        ck.save(d1.path()).unwrap();
        let back = Checkpoint::load(d1.path()).unwrap();
        assert!(back.params.bit_eq(&ck.params));
        assert_eq!(back, ck);
        let d2 = tempfile::tempdir().unwrap();
        back.save(d2.path()).unwrap();
        for f in ["manifest.json", "params.bin"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn metric_floats_survive_the_manifest() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = tempfile::tempdir().unwrap();
        for _ in 0..50 {
            let mut x = || rng.random::<f64>() * 10f64.powi(rng.random_range(-3..3));
            let m = EpochMetrics {
                epoch: 1,
                lr: x(),
                loss_base: x(),
                loss_kd1: x(),
                loss_kd2: x(),
                loss_total: x(),
                train_top1: x(),
                val_top1: x(),
            };
            let ck = Checkpoint { metrics: Some(m), ..tiny() };
            ck.save(d.path()).unwrap();
            assert_eq!(Checkpoint::load(d.path()).unwrap(), ck);
        }
    }

    #[test]
    fn version_and_length_are_checked() {
        let ck = tiny();
        let d = tempfile::tempdir().unwrap();
        ck.save(d.path()).unwrap();
        let m = d.path().join("manifest.json");
        let text = fs::read_to_string(&m).unwrap();
        fs::write(&m, text.replacen("\"version\": 1", "\"version\": 99", 1)).unwrap();
        let err = Checkpoint::load(d.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        fs::write(&m, text).unwrap();
        let bin = d.path().join("params.bin");
        let mut blob = fs::read(&bin).unwrap();
        blob.truncate(blob.len() - 8);
        fs::write(&bin, blob).unwrap();
        assert!(Checkpoint::load(d.path()).is_err());
    }
}
