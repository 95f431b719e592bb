//! Run configuration: one JSON object of flat dotted keys, then flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lipdistill::data::SynthConfig;
use lipdistill::losses::DistillConfig;
use lipdistill::nn::ModelConfig;
use lipdistill::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Default output root when neither the config nor the flag sets one.
pub const OUT_ENV: &str = "LIPDISTILL_OUT";

/// Model fields that always follow the dataset and cannot be set directly.
const DERIVED: [&str; 7] = [
    "model.visual_frames",
    "model.visual_channels",
    "model.visual_height",
    "model.visual_width",
    "model.audio_frames",
    "model.audio_bins",
    "model.num_classes",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub ablation: AblationConfig,
    /// Output root; falls back to `$LIPDISTILL_OUT`, then `lipdistill-out`.
    pub out_dir: Option<String>,
}

fn leaves(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(child, &key, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("settable keys come from the default tree")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .expect("settable keys come from the default tree")
        .insert(parts[parts.len() - 1].to_string(), value);
}

/// Every key that may appear in a config file or as a `--key value` flag.
pub fn settable_keys() -> BTreeMap<String, Value> {
    let tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = BTreeMap::new();
    leaves(&tree, "", &mut out);
    for d in DERIVED {
        out.remove(d);
    }
    out
}

/// A flag value: JSON when it parses as JSON, otherwise a bare string.
pub fn parse_flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Build from an optional config file and ordered `(key, value)` overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let keys = settable_keys();
        let mut entries: Vec<(String, Value)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let Value::Object(m) = v else {
                return Err(CliError::Validation(format!("{}: expected a JSON object", path.display())));
            };
            entries.extend(m);
        }
        entries.extend(overrides.iter().cloned());

        let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
        for (k, v) in entries {
            if DERIVED.contains(&k.as_str()) {
                return Err(CliError::Validation(format!(
                    "{k} is derived from the data.* settings and cannot be set"
                )));
            }
            if !keys.contains_key(&k) {
                return Err(CliError::Validation(format!("unknown config key {k:?}")));
            }
            set_path(&mut tree, &k, v);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.sync_model_geometry();
        Ok(cfg)
    }

    fn sync_model_geometry(&mut self) {
        let d = &self.data;
        let m = &mut self.model;
        m.visual_frames = d.visual_frames;
        m.visual_channels = 1;
        m.visual_height = d.height;
        m.visual_width = d.width;
        m.audio_frames = d.audio_frames;
        m.audio_bins = d.audio_bins;
        m.num_classes = d.num_classes;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate().map_err(CliError::Validation)?;
        self.model.validate().map_err(CliError::Validation)?;
        self.train.validate().map_err(CliError::Validation)?;
        self.distill.validate().map_err(CliError::Validation)?;
        if self.ablation.seeds.is_empty() {
            return Err(CliError::Validation("ablation.seeds needs at least one seed".into()));
        }
        Ok(())
    }

    pub fn out_root(&self) -> PathBuf {
        match &self.out_dir {
            Some(d) => PathBuf::from(d),
            None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| "lipdistill-out".into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_flat_and_leafy() {
        let k = settable_keys();
        for key in ["train.initial_lr", "distill.sigma", "data.num_classes", "model.hidden", "ablation.seeds", "out_dir"] {
            assert!(k.contains_key(key), "{key}");
        }
        assert!(!k.contains_key("train"));
        assert!(!k.contains_key("model.num_classes"));
        assert_eq!(k["train.max_steps"], Value::Null);
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = vec![
            ("train.epochs".to_string(), parse_flag_value("4")),
            ("train.epochs".to_string(), parse_flag_value("5")),
            ("distill.kd1_enabled".to_string(), parse_flag_value("true")),
            ("data.num_classes".to_string(), parse_flag_value("8")),
        ];
        let c = RunConfig::load(None, &o).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert!(c.distill.kd1_enabled);
        assert_eq!(c.model.num_classes, 8);
    }

    #[test]
    fn unknown_and_derived_keys_are_rejected() {
        for k in ["train.epoch", "model.audio_frames", "train", "nope"] {
            let e = RunConfig::load(None, &[(k.to_string(), Value::from(1))]).unwrap_err();
            assert!(matches!(e, CliError::Validation(_)), "{k}");
        }
    }

    #[test]
    fn type_errors_are_validation_errors() {
        let e = RunConfig::load(None, &[("train.epochs".into(), parse_flag_value("many"))]).unwrap_err();
        assert!(matches!(e, CliError::Validation(_)));
    }

    #[test]
    fn file_then_flags() {
        let d = tempfile::tempdir().unwrap();
        let f = d.path().join("c.json");
        std::fs::write(&f, r#"{"train.epochs": 2, "distill.sigma": 2.0}"#).unwrap();
        let c = RunConfig::load(Some(&f), &[("train.epochs".into(), Value::from(7))]).unwrap();
        assert_eq!((c.train.epochs, c.distill.sigma), (7, 2.0));
        std::fs::write(&f, r#"{"train": {"epochs": 2}}"#).unwrap();
        assert!(RunConfig::load(Some(&f), &[]).is_err());
    }
}
