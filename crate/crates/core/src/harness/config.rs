//! Versioned TOML experiment configuration.
//!
//! ```toml
//! schema_version = 1
//! name = "cifar-small"
//! seeds = [0, 1, 2]
//!
//! [dataset]
//! id = "cifar10"
//! root = "data/cifar-10"      # optional; else $MASKANYNET_DATA, else data/cifar-10
//! train_subset = 2000          # class-balanced, file order
//! val_subset = 1000            # held-out train images scored every epoch
//! test_subset = 10000          # optional; whole test split when absent
//!
//! [model]
//! backbone = "resnet-tiny"
//! split_point = "stage1"       # optional
//! eval_masking = "grid"        # or "stochastic"
//! [model.fusion]
//! level = "feature"
//! align_depth = 3
//! shared_low = true
//!
//! [toggles]
//! mask = true
//! reuse = true
//! ffa = true
//!
//! [mask]
//! strategy = "combined"
//! ratio = 0.25
//! block_size = 4               # optional
//!
//! [train]
//! optimizer = "sgd"
//! lr = 0.05
//! momentum = 0.9
//! weight_decay = 5e-4
//! schedule = "cosine"
//! epochs = 20
//! batch_size = 64
//! augment = true
//!
//! [output]
//! dir = "runs"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::DatasetId;
use crate::error::{Error, Result};
use crate::masking::MaskPolicy;
use crate::model::{BackboneId, EvalMasking, FusionConfig, ModelConfig, Toggles};
use crate::nn::OptimizerKind;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: DatasetId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    pub val_subset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            id: DatasetId::Cifar10,
            root: None,
            train_subset: Some(2000),
            val_subset: 1000,
            test_subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_point: Option<String>,
    pub eval_masking: EvalMasking,
    pub fusion: FusionConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneId::ResnetTiny,
            split_point: None,
            eval_masking: EvalMasking::Grid,
            fusion: FusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over all steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Only used by SGD.
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random 4-pixel-padded crop plus horizontal flip, applied before masking.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            epochs: 20,
            batch_size: 64,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

/// Corpus analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub w1: f64,
    pub w2: f64,
    pub s_a: f64,
    /// Maximum number of images (pairs) analyzed.
    pub pairs: usize,
    /// Checkpoint directory of the feature extractor; a seeded untrained
    /// backbone when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let f = crate::metrics::FScoreConfig::default();
        Self {
            w1: f.w1,
            w2: f.w2,
            s_a: f.s_a,
            pairs: f.pairs,
            extractor: None,
        }
    }
}

impl AnalysisConfig {
    pub fn f_score(&self) -> crate::metrics::FScoreConfig {
        crate::metrics::FScoreConfig {
            w1: self.w1,
            w2: self.w2,
            s_a: self.s_a,
            pairs: self.pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default)]
    pub mask: MaskPolicy,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "experiment".into(),
            seeds: vec![0, 1, 2],
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            toggles: Toggles::FULL,
            mask: MaskPolicy::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn schema_error(source: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{source}: {e}"))
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string (`mask.strategy=grid`).
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {text:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        Self::from_toml_with(text, source, &[])
    }

    /// Parses `text`, applies `overrides` (`key=value`), then validates.
    pub fn from_toml_with(text: &str, source: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| schema_error(source, e))?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, &key, value)?;
        }
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| schema_error(source, e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, &path.display().to_string(), overrides)
    }

    /// The built-in defaults with `overrides` applied.
    pub fn defaults_with(overrides: &[String]) -> Result<Self> {
        let text = toml::to_string(&Self::default()).map_err(|e| schema_error("defaults", e))?;
        Self::from_toml_with(&text, "defaults", overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| schema_error("serialize", e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.weight_decay < 0.0 || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Range(format!(
                "train.lr must be positive, weight_decay non-negative and momentum in [0, 1); got {}, {}, {}",
                t.lr, t.weight_decay, t.momentum
            )));
        }
        if self.dataset.train_subset == Some(0) || self.dataset.test_subset == Some(0) {
            return Err(Error::Config("dataset subsets must be positive when set".into()));
        }
        self.analysis.f_score().validate()?;
        self.model_config(self.seeds[0]).validate()
    }

    /// The model built for one seed of this experiment.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        let mut m = ModelConfig::cifar(self.model.backbone);
        m.split_point = self.model.split_point.clone();
        m.fusion = self.model.fusion.clone();
        m.eval_masking = self.model.eval_masking;
        m.toggles = self.toggles;
        m.mask = self.mask.clone();
        m.seed = seed;
        m
    }

    /// The same experiment with different ablation toggles.
    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        Self {
            toggles,
            ..self.clone()
        }
    }

    /// SHA-256 over the canonical JSON form of the config, without the
    /// experiment name and output location (which do not affect results).
    pub fn hash(&self) -> String {
        self.hash_without(&[])
    }

    /// [`ExperimentConfig::hash`] with the dotted keys in `exclude` removed.
    /// Arms of an ablation share `hash_without(&["toggles"])`.
    pub fn hash_without(&self, exclude: &[&str]) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        remove_path(&mut value, "output");
        remove_path(&mut value, "name");
        for key in exclude {
            remove_path(&mut value, key);
        }
        // serde_json maps are ordered by key, so this text is canonical.
        let text = serde_json::to_string(&value).expect("value serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn remove_path(value: &mut serde_json::Value, key: &str) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = value;
    for p in parts {
        match cur.get_mut(p) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Some(map) = cur.as_object_mut() {
        map.remove(last);
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
