//! Run configuration: one JSON file drives every pipeline command.
//! Unknown keys are rejected, `--set key=value` overrides individual
//! entries, and validation reports every problem at once.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenerateConfig;
use crate::error::{EgnError, Result};
use crate::extractor::{ExtractorConfig, ExtractorTrainConfig};
use crate::index::DistanceMetric;
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub n_folds: usize,
    /// Evaluate only the first n folds (None = all); cuts runtime for
    /// sweeps where one fold is representative.
    pub eval_folds: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 1e-4,
            n_folds: 3,
            eval_folds: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub metric: DistanceMetric,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { metric: DistanceMetric::L2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every artifact this run produces lands under this directory.
    pub run_dir: PathBuf,
    /// Dataset bundle directory (manifest.json + data.egnd).
    pub data_dir: PathBuf,
    /// Where the extractor checkpoint and exemplar index live; defaults to
    /// run_dir. Point several runs (e.g. ablation variants) at one
    /// directory to share the stage-1 artifacts.
    pub artifacts_dir: Option<PathBuf>,
    pub seed: u64,
    pub variant: String,
    pub generate: GenerateConfig,
    pub extractor: ExtractorConfig,
    pub extractor_train: ExtractorTrainConfig,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_dir: PathBuf::from("runs/default"),
            data_dir: PathBuf::from("data/synthetic"),
            artifacts_dir: None,
            seed: 0,
            variant: "full".to_string(),
            generate: GenerateConfig::default(),
            extractor: ExtractorConfig::default(),
            extractor_train: ExtractorTrainConfig::default(),
            model: ModelConfig::desk(),
            retrieval: RetrievalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn artifacts_dir(&self) -> &Path {
        self.artifacts_dir.as_deref().unwrap_or(&self.run_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| EgnError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| EgnError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Apply `key=value` overrides using dotted paths into the JSON
    /// representation, e.g. `train.lr=1e-3` or `model.depth=2`.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                EgnError::Config(format!("override `{item}` is not of the form key=value"))
            })?;
            let new_leaf: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = slot.as_object_mut().ok_or_else(|| {
                    EgnError::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join(".")))
                })?;
                slot = obj.get_mut(*part).ok_or_else(|| {
                    EgnError::Config(format!("override `{key}`: no such config key `{part}`"))
                })?;
                if i + 1 == parts.len() {
                    *slot = new_leaf.clone();
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| EgnError::Config(format!("after overrides: {e}")))?;
        Ok(cfg)
    }

    /// Every problem reported at once, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.model.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.extractor.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = Variant::parse(&self.variant) {
            errs.push(e.to_string());
        }
        if self.extractor.style_dim != self.model.style_dim {
            errs.push(format!(
                "extractor.style_dim {} != model.style_dim {}",
                self.extractor.style_dim, self.model.style_dim
            ));
        }
        if self.extractor.image_size != self.model.image_size {
            errs.push(format!(
                "extractor.image_size {} != model.image_size {}",
                self.extractor.image_size, self.model.image_size
            ));
        }
        if self.train.n_folds < 2 {
            errs.push(format!("train.n_folds {} must be at least 2", self.train.n_folds));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            errs.push("train.epochs and train.batch_size must be positive".to_string());
        }
        if self.train.batch_size < 2 {
            errs.push("train.batch_size must be at least 2 (PCC loss needs a batch)".to_string());
        }
        if !(self.train.lr > 0.0) {
            errs.push(format!("train.lr {} must be positive", self.train.lr));
        }
        if let Some(n) = self.train.eval_folds {
            if n == 0 || n > self.train.n_folds {
                errs.push(format!(
                    "train.eval_folds {} must be in 1..={}",
                    n, self.train.n_folds
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EgnError::Config(errs.join("\n")))
        }
    }
}
