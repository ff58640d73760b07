//! Experiment configuration.
//!
//! Configs are strict JSON: unknown keys are rejected, omitted keys take the
//! defaults below, and every error names the offending field as a JSON
//! pointer (`/pruning/rho`). The resolved config, with all defaults filled
//! in, is what gets hashed and echoed in the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{CostWeights, DeviceProfile};
use crate::data::{self, Dataset, DatasetSpec, PartitionScheme};
use crate::error::{Error, Result};
use crate::fleet::Method;
use crate::model::ModelLayout;
use crate::trainer::{Optimizer, ScheduleSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(DatasetSpec),
    File(DatasetFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub format: FileFormat,
    /// Class count for CSV input; defaults to the largest label plus one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_bytes: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    #[default]
    Pbds,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "defaults::num_devices")]
    pub num_devices: usize,
    #[serde(default = "defaults::scheme")]
    pub scheme: PartitionScheme,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_devices: defaults::num_devices(),
            scheme: defaults::scheme(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    /// Must match the dataset when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: defaults::hidden_dim(),
            input_dim: None,
            num_classes: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSettings {
    /// Warm-up length in epochs of the device's shard. Exclusive with
    /// `iterations`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Warm-up length in iterations; must still cover every shard once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Defaults to the training batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Defaults to a constant rate of twice the training `eta0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
}

impl WarmupSettings {
    /// `T0` for a shard of `n` samples.
    pub fn iterations_for(&self, n: usize) -> usize {
        match (self.epochs, self.iterations) {
            (_, Some(it)) => it,
            (e, None) => {
                crate::pruner::WarmupConfig::epoch_iterations(e.unwrap_or(1), n, self.batch_size())
            }
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.expect("resolved config")
    }

    pub fn schedule(&self) -> ScheduleSpec {
        self.schedule.expect("resolved config")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::schedule")]
    pub schedule: ScheduleSpec,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            schedule: defaults::schedule(),
            optimizer: defaults::optimizer(),
            eval_every: 0,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            optimizer: self.optimizer,
            seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSettings {
    #[serde(default = "defaults::rho")]
    pub rho: f64,
}

impl Default for PruningSettings {
    fn default() -> Self {
        Self {
            rho: defaults::rho(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    #[serde(default = "defaults::throughput")]
    pub throughput: f64,
    #[serde(default = "defaults::power")]
    pub power: f64,
    /// Defaults to the dataset's per-sample size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_bytes: Option<u32>,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            throughput: defaults::throughput(),
            power: defaults::power(),
            per_sample_bytes: None,
        }
    }
}

impl ProfileSpec {
    pub fn resolve(&self, dataset_bytes: u32) -> DeviceProfile {
        DeviceProfile {
            throughput: self.throughput,
            power: self.power,
            per_sample_bytes: self.per_sample_bytes.unwrap_or(dataset_bytes),
        }
    }

    fn validate_at(&self, prefix: &str) -> Result<()> {
        if !(self.throughput > 0.0 && self.throughput.is_finite()) {
            return Err(Error::config(
                format!("{prefix}/throughput"),
                "must be positive",
            ));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::config(format!("{prefix}/power"), "must be positive"));
        }
        if self.per_sample_bytes == Some(0) {
            return Err(Error::config(
                format!("{prefix}/per_sample_bytes"),
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// One profile for every device, or one per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileConfig {
    Uniform(ProfileSpec),
    PerDevice(Vec<ProfileSpec>),
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig::Uniform(ProfileSpec::default())
    }
}

impl ProfileConfig {
    pub fn for_device(&self, device: usize) -> &ProfileSpec {
        match self {
            ProfileConfig::Uniform(p) => p,
            ProfileConfig::PerDevice(list) => &list[device],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub warmup: WarmupSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub pruning: PruningSettings,
    #[serde(default = "defaults::methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub profile: ProfileConfig,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
}

mod defaults {
    use super::*;

    pub fn num_devices() -> usize {
        15
    }
    pub fn scheme() -> PartitionScheme {
        PartitionScheme::Dirichlet { beta: 0.5 }
    }
    pub fn hidden_dim() -> usize {
        32
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn schedule() -> ScheduleSpec {
        ScheduleSpec::cosine(0.2, 0.0)
    }
    pub fn optimizer() -> Optimizer {
        Optimizer::Sgd
    }
    pub fn rho() -> f64 {
        0.5
    }
    pub fn methods() -> Vec<Method> {
        vec![Method::Importance, Method::Random, Method::Full]
    }
    pub fn throughput() -> f64 {
        1e9
    }
    pub fn power() -> f64 {
        2.0
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2, 3, 4]
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
}

/// Renders a `serde_path_to_error` path as a JSON pointer.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1")))
            }
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl ExperimentConfig {
    /// Parses, fills defaults, and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = pointer(e.path());
            Error::config(path, e.into_inner().to_string())
        })?;
        de.end().map_err(|e| Error::config("/", e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self) {
        if self.warmup.epochs.is_none() && self.warmup.iterations.is_none() {
            self.warmup.epochs = Some(1);
        }
        self.warmup.batch_size.get_or_insert(self.train.batch_size);
        self.warmup
            .schedule
            .get_or_insert(ScheduleSpec::constant(2.0 * self.train.schedule.eta0));
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => spec.validate_at("/dataset/synthetic")?,
            DatasetSource::File(file) => {
                if file.per_sample_bytes == Some(0) {
                    return Err(Error::config(
                        "/dataset/file/per_sample_bytes",
                        "must be positive",
                    ));
                }
            }
        }
        if self.partition.num_devices == 0 {
            return Err(Error::config("/partition/num_devices", "must be positive"));
        }
        if let PartitionScheme::Dirichlet { beta } = self.partition.scheme {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::config(
                    "/partition/scheme/dirichlet/beta",
                    "must be positive",
                ));
            }
        }
        if self.warmup.epochs.is_some() && self.warmup.iterations.is_some() {
            return Err(Error::config(
                "/warmup/iterations",
                "give either warm-up epochs or iterations, not both",
            ));
        }
        if self.warmup.epochs == Some(0) {
            return Err(Error::config("/warmup/epochs", "must be at least 1"));
        }
        if self.warmup.iterations == Some(0) {
            return Err(Error::config("/warmup/iterations", "must be at least 1"));
        }
        if self.warmup.batch_size == Some(0) {
            return Err(Error::config("/warmup/batch_size", "must be at least 1"));
        }
        if let Some(s) = &self.warmup.schedule {
            s.validate_at("/warmup/schedule")?;
        }
        if self.train.epochs == 0 {
            return Err(Error::config("/train/epochs", "must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("/train/batch_size", "must be at least 1"));
        }
        self.train.schedule.validate_at("/train/schedule")?;
        if let Optimizer::Adam { beta1, beta2, eps } = self.train.optimizer {
            let at = |f: &str| format!("/train/optimizer/adam/{f}");
            if !(0.0..1.0).contains(&beta1) {
                return Err(Error::config(at("beta1"), "must be in [0, 1)"));
            }
            if !(0.0..1.0).contains(&beta2) {
                return Err(Error::config(at("beta2"), "must be in [0, 1)"));
            }
            if eps.is_nan() || eps <= 0.0 {
                return Err(Error::config(at("eps"), "must be positive"));
            }
        }
        let rho = self.pruning.rho;
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::config(
                "/pruning/rho",
                format!("{rho} is outside (0, 1]"),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::config("/methods", "must list at least one method"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::config(format!("/methods/{i}"), "duplicate method"));
            }
        }
        match &self.profile {
            ProfileConfig::Uniform(p) => p.validate_at("/profile")?,
            ProfileConfig::PerDevice(list) => {
                if list.len() != self.partition.num_devices {
                    return Err(Error::config(
                        "/profile",
                        format!(
                            "{} profiles for {} devices",
                            list.len(),
                            self.partition.num_devices
                        ),
                    ));
                }
                for (i, p) in list.iter().enumerate() {
                    p.validate_at(&format!("/profile/{i}"))?;
                }
            }
        }
        let w = &self.weights;
        for (name, v) in [
            ("lambda_tau", w.lambda_tau),
            ("lambda_e", w.lambda_e),
            ("lambda_s", w.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("/weights/{name}"),
                    "must be non-negative",
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("/seeds", "must list at least one seed"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("/test_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// Loads or generates the corpus. Relative file paths resolve against
    /// `base_dir`.
    pub fn load_corpus(&self, base_dir: &Path) -> Result<Dataset> {
        let data = match &self.dataset {
            DatasetSource::Synthetic(spec) => data::generate_synthetic(spec)?,
            DatasetSource::File(file) => {
                let path = if file.path.is_absolute() {
                    file.path.clone()
                } else {
                    base_dir.join(&file.path)
                };
                let mut data = match file.format {
                    FileFormat::Pbds => data::load_dataset(&path)?,
                    FileFormat::Csv => data::load_csv(&path, file.num_classes)?,
                };
                if let Some(bytes) = file.per_sample_bytes {
                    data.set_per_sample_bytes(bytes);
                }
                data
            }
        };
        self.layout_for(&data)?;
        Ok(data)
    }

    pub fn layout_for(&self, data: &Dataset) -> Result<ModelLayout> {
        if let Some(d) = self.model.input_dim {
            if d != data.feature_dim() {
                return Err(Error::config(
                    "/model/input_dim",
                    format!("dataset has {} features", data.feature_dim()),
                ));
            }
        }
        if let Some(c) = self.model.num_classes {
            if c != data.num_classes() {
                return Err(Error::config(
                    "/model/num_classes",
                    format!("dataset has {} classes", data.num_classes()),
                ));
            }
        }
        ModelLayout::new(
            data.feature_dim(),
            self.model.hidden_dim,
            data.num_classes(),
        )
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads a standalone dataset spec, with the same strictness as configs.
pub fn parse_dataset_spec(path: impl AsRef<Path>) -> Result<DatasetSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let spec: DatasetSpec = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::config(pointer(e.path()), e.into_inner().to_string()))?;
    de.end().map_err(|e| Error::config("/", e.to_string()))?;
    spec.validate_at("")?;
    Ok(spec)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub version: String,
    pub command: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub outputs: Vec<String>,
    pub sweep_rows: usize,
    /// Ratios covered by `sweep.csv`, in row order.
    pub rhos: Vec<f64>,
    /// `c * b` of the main training phase.
    pub train_step_flops: u64,
    pub workers: usize,
    /// Measured, machine-dependent; never part of the CSV outputs.
    pub warmup_wall_s: f64,
    pub train_wall_s: f64,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, command: &str) -> Self {
        Self {
            config_hash: cfg.hash(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            started_unix_s: unix_now(),
            finished_unix_s: 0,
            outputs: Vec::new(),
            sweep_rows: 0,
            rhos: vec![cfg.pruning.rho],
            train_step_flops: 0,
            workers: 1,
            warmup_wall_s: 0.0,
            train_wall_s: 0.0,
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix_s = unix_now();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}
