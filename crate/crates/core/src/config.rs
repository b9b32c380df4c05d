//! The run configuration: one TOML file describing paths and every stage's
//! parameters. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::HornSchunck;
use crate::loss::LossWeights;
use crate::model::Architecture;
use crate::patch::Stream;
use crate::score::Normalization;
use crate::synth::{CorpusSpec, Split};
use crate::train::{BatchUnit, TrainConfig};

/// Overrides `paths.cache_root`.
pub const CACHE_ROOT_ENV: &str = "STFUSE_CACHE_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub ingest: IngestConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            corpus: CorpusSpec::default(),
            ingest: IngestConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Frames, detections, labels and the dataset manifest.
    pub data_root: PathBuf,
    pub cache_root: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "run/data".into(),
            cache_root: "run/cache".into(),
            checkpoints: "run/checkpoints".into(),
            reports: "run/reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowBackend {
    #[default]
    HornSchunck,
    /// Read `<precomputed_flow_dir>/<video>.flow` files in the flow cache format.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub train_threshold: f64,
    pub test_threshold: f64,
    pub train_n: usize,
    pub test_n: usize,
    pub flow_backend: FlowBackend,
    pub precomputed_flow_dir: Option<PathBuf>,
    pub horn_schunck: HornSchunck,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            train_threshold: 0.5,
            test_threshold: 0.4,
            train_n: 18,
            test_n: 24,
            flow_backend: FlowBackend::HornSchunck,
            precomputed_flow_dir: None,
            horn_schunck: HornSchunck::default(),
        }
    }
}

impl IngestConfig {
    pub fn threshold(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train_threshold,
            Split::Test => self.test_threshold,
        }
    }

    pub fn n(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_n,
            Split::Test => self.test_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub latent_dim: usize,
    pub memory_slots: usize,
    /// Defaults to `1 / memory_slots`.
    pub shrink_threshold: Option<f64>,
    pub renormalize_after_shrink: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = Architecture::new(Stream::Spatial);
        Self {
            channels: arch.channels,
            latent_dim: arch.latent_dim,
            memory_slots: arch.memory_slots,
            shrink_threshold: None,
            renormalize_after_shrink: arch.renormalize_after_shrink,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, stream: Stream, memory_enabled: bool, seed: u64) -> Architecture {
        Architecture {
            channels: self.channels,
            latent_dim: self.latent_dim,
            memory_slots: self.memory_slots,
            shrink_threshold: self
                .shrink_threshold
                .unwrap_or(1.0 / self.memory_slots.max(1) as f64),
            renormalize_after_shrink: self.renormalize_after_shrink,
            memory_enabled,
            seed,
            ..Architecture::new(stream)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamTrain {
    /// Defaults to 0.001 for the spatial stream and 0.0001 for the temporal one.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub batch_unit: BatchUnit,
    pub epochs: usize,
    pub recon_weight: f64,
    pub entropy_weight: f64,
    pub patience: usize,
    pub plateau_tolerance: f64,
}

impl Default for StreamTrain {
    fn default() -> Self {
        let t = TrainConfig::new(Stream::Spatial);
        Self {
            learning_rate: None,
            batch_size: t.batch_size,
            batch_unit: t.batch_unit,
            epochs: t.epochs,
            recon_weight: t.loss_weights.recon,
            entropy_weight: t.loss_weights.entropy,
            patience: t.patience,
            plateau_tolerance: t.plateau_tolerance,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub spatial: StreamTrain,
    pub temporal: StreamTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub window: usize,
    pub normalization: Normalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: 10,
            normalization: Normalization::Literal,
        }
    }
}

impl RunConfig {
    /// Parses TOML text. Unknown keys and bad values are config errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, then applies the cache-root environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(CACHE_ROOT_ENV) {
            self.paths.cache_root = root.into();
        }
    }

    /// Applies one `dotted.key=value` override. The value is read as a TOML
    /// value, falling back to a bare string.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(self).expect("config serializes to TOML");
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes to JSON")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        let ing = &self.ingest;
        for t in [ing.train_threshold, ing.test_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return cfg("detection thresholds must lie in [0, 1]");
            }
        }
        if ing.train_n == 0 || ing.test_n == 0 {
            return cfg("target counts n must be >= 1");
        }
        if ing.flow_backend == FlowBackend::Precomputed && ing.precomputed_flow_dir.is_none() {
            return cfg("flow_backend = \"precomputed\" needs precomputed_flow_dir");
        }
        if self.eval.window == 0 {
            return cfg("smoothing window must be >= 1");
        }
        for stream in [Stream::Spatial, Stream::Temporal] {
            self.architecture(stream, true)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
            self.train_config(stream).validate()?;
        }
        Ok(())
    }

    pub fn architecture(&self, stream: Stream, memory_enabled: bool) -> Architecture {
        self.model.architecture(stream, memory_enabled, self.seed)
    }

    pub fn train_config(&self, stream: Stream) -> TrainConfig {
        let s = match stream {
            Stream::Spatial => &self.train.spatial,
            Stream::Temporal => &self.train.temporal,
        };
        let base = TrainConfig::new(stream);
        TrainConfig {
            learning_rate: s.learning_rate.unwrap_or(base.learning_rate),
            batch_size: s.batch_size,
            batch_unit: s.batch_unit,
            epochs: s.epochs,
            loss_weights: LossWeights {
                recon: s.recon_weight,
                entropy: s.entropy_weight,
            },
            n: self.ingest.train_n,
            seed: self.seed,
            patience: s.patience,
            plateau_tolerance: s.plateau_tolerance,
            ..base
        }
    }
}
