//! Experiment configuration: a strict TOML schema (unknown keys rejected)
//! plus the content hash that stamps every artifact the runner writes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlab_core::data::BlobSpec;
use unlab_core::nn::ModelDims;
use unlab_core::optim::OptimizerKind;
use unlab_core::unlearn::{TrainSchedule, UnlearnConfig, Variant};

use crate::{RunError, RunResult};

fn default_out_dir() -> String {
    "out".into()
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "DatasetSection::default_kind")]
    pub kind: String,
    #[serde(default = "DatasetSection::default_classes")]
    pub classes: usize,
    #[serde(default = "DatasetSection::default_dim")]
    pub dim: usize,
    #[serde(default = "DatasetSection::default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "DatasetSection::default_sigma")]
    pub sigma: f64,
    #[serde(default = "DatasetSection::default_mean_scale")]
    pub mean_scale: f64,
    /// ULAB paths when kind = "file".
    #[serde(default)]
    pub train_path: Option<String>,
    #[serde(default)]
    pub test_path: Option<String>,
}

impl DatasetSection {
    fn default_kind() -> String {
        "blobs".into()
    }
    fn default_classes() -> usize {
        20
    }
    fn default_dim() -> usize {
        32
    }
    fn default_n_per_class() -> usize {
        50
    }
    fn default_sigma() -> f64 {
        0.55
    }
    fn default_mean_scale() -> f64 {
        3.0
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.classes,
            dim: self.dim,
            n_per_class: self.n_per_class,
            sigma: self.sigma,
            mean_scale: self.mean_scale,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSection {
    /// Number of downstream datasets (paper-parity mode uses 3).
    #[serde(default = "DownstreamSection::default_count")]
    pub count: usize,
    #[serde(default = "DownstreamSection::default_classes")]
    pub classes: usize,
    #[serde(default = "DownstreamSection::default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "DownstreamSection::default_sigma")]
    pub sigma: f64,
    #[serde(default = "DownstreamSection::default_mean_scale")]
    pub mean_scale: f64,
    /// Added to the experiment seed so downstream class means are disjoint
    /// from the source dataset's.
    #[serde(default = "DownstreamSection::default_seed_offset")]
    pub seed_offset: u64,
}

impl DownstreamSection {
    fn default_count() -> usize {
        1
    }
    fn default_classes() -> usize {
        8
    }
    fn default_n_per_class() -> usize {
        30
    }
    fn default_sigma() -> f64 {
        0.45
    }
    fn default_mean_scale() -> f64 {
        3.0
    }
    fn default_seed_offset() -> u64 {
        9000
    }
}

impl Default for DownstreamSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    /// "random" or "top-similarity".
    #[serde(default = "SplitSection::default_strategy")]
    pub strategy: String,
    /// Number of forget classes (10% of classes by default).
    #[serde(default)]
    pub forget_classes: Option<usize>,
    /// Downstream set index used by top-similarity selection.
    #[serde(default)]
    pub similarity_downstream: usize,
}

impl SplitSection {
    fn default_strategy() -> String {
        "random".into()
    }

    pub fn forget_count(&self, classes: usize) -> usize {
        self.forget_classes.unwrap_or_else(|| (classes / 10).max(1))
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "ModelSection::default_stage_widths")]
    pub stage_widths: Vec<usize>,
    #[serde(default = "ModelSection::default_d_proj")]
    pub d_proj: usize,
    #[serde(default)]
    pub split_final: bool,
}

impl ModelSection {
    fn default_stage_widths() -> Vec<usize> {
        vec![16, 20, 24, 32]
    }
    fn default_d_proj() -> usize {
        24
    }

    pub fn dims(&self, input_dim: usize, classes: usize) -> ModelDims {
        ModelDims {
            input_dim,
            stage_widths: self.stage_widths.clone(),
            classes,
            d_proj: self.d_proj,
            split_final: self.split_final,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn parse_optimizer(name: &str, momentum: f64) -> RunResult<OptimizerKind> {
    match name {
        "adam" => Ok(OptimizerKind::adam_default()),
        "sgd-momentum" => Ok(OptimizerKind::sgd(momentum)),
        other => Err(RunError::Config(format!(
            "unknown optimizer {other:?} (expected \"adam\" or \"sgd-momentum\")"
        ))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "PretrainSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "PretrainSection::default_lr")]
    pub lr: f64,
    #[serde(default = "PretrainSection::default_batch")]
    pub batch: usize,
    #[serde(default = "PretrainSection::default_optimizer")]
    pub optimizer: String,
    #[serde(default = "PretrainSection::default_momentum")]
    pub momentum: f64,
}

impl PretrainSection {
    fn default_epochs() -> usize {
        80
    }
    fn default_lr() -> f64 {
        0.05
    }
    fn default_batch() -> usize {
        64
    }
    fn default_optimizer() -> String {
        "sgd-momentum".into()
    }
    fn default_momentum() -> f64 {
        0.9
    }

    pub fn schedule(&self) -> RunResult<TrainSchedule> {
        Ok(TrainSchedule {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            optimizer: parse_optimizer(&self.optimizer, self.momentum)?,
        })
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupconSection {
    #[serde(default = "SupconSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "SupconSection::default_lr")]
    pub lr: f64,
    #[serde(default = "SupconSection::default_batch")]
    pub batch: usize,
    #[serde(default = "SupconSection::default_temperature")]
    pub temperature: f64,
}

impl SupconSection {
    fn default_epochs() -> usize {
        30
    }
    fn default_lr() -> f64 {
        3e-3
    }
    fn default_batch() -> usize {
        128
    }
    fn default_temperature() -> f64 {
        0.1
    }
}

impl Default for SupconSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnSection {
    #[serde(default = "UnlearnSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "UnlearnSection::default_lr")]
    pub lr: f64,
    #[serde(default = "UnlearnSection::default_forget_batch")]
    pub forget_batch: usize,
    #[serde(default = "UnlearnSection::default_retain_batch")]
    pub retain_batch: usize,
    #[serde(default = "UnlearnSection::default_omega")]
    pub omega: usize,
    #[serde(default = "UnlearnSection::default_temperature")]
    pub temperature: f64,
    #[serde(default = "UnlearnSection::default_lambda")]
    pub lambda_cu: f64,
    #[serde(default = "UnlearnSection::default_lambda")]
    pub lambda_ce: f64,
    #[serde(default = "UnlearnSection::default_weights")]
    pub weights: Vec<f64>,
    #[serde(default = "UnlearnSection::default_optimizer")]
    pub optimizer: String,
    #[serde(default = "UnlearnSection::default_momentum")]
    pub momentum: f64,
}

impl UnlearnSection {
    fn default_epochs() -> usize {
        200
    }
    fn default_lr() -> f64 {
        2.5e-3
    }
    fn default_forget_batch() -> usize {
        32
    }
    fn default_retain_batch() -> usize {
        32
    }
    fn default_omega() -> usize {
        2
    }
    fn default_temperature() -> f64 {
        0.07
    }
    fn default_lambda() -> f64 {
        1.5
    }
    fn default_weights() -> Vec<f64> {
        vec![0.2, 0.4, 0.8, 1.0]
    }
    fn default_optimizer() -> String {
        "adam".into()
    }
    fn default_momentum() -> f64 {
        0.9
    }

    pub fn unlearn_config(&self, variant: Variant) -> RunResult<UnlearnConfig> {
        Ok(UnlearnConfig {
            weights: self.weights.clone(),
            lambda_cu: self.lambda_cu,
            lambda_ce: self.lambda_ce,
            temperature: self.temperature,
            omega: self.omega,
            epochs: self.epochs,
            lr: self.lr,
            forget_batch: self.forget_batch,
            retain_batch: self.retain_batch,
            optimizer: parse_optimizer(&self.optimizer, self.momentum)?,
            variant,
        })
    }

    pub fn schedule(&self) -> RunResult<TrainSchedule> {
        Ok(TrainSchedule {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.forget_batch + self.retain_batch,
            optimizer: parse_optimizer(&self.optimizer, self.momentum)?,
        })
    }

    fn apply(&mut self, o: &UnlearnOverride) {
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = o.lr {
            self.lr = v;
        }
        if let Some(v) = o.forget_batch {
            self.forget_batch = v;
        }
        if let Some(v) = o.retain_batch {
            self.retain_batch = v;
        }
        if let Some(v) = o.omega {
            self.omega = v;
        }
        if let Some(v) = o.temperature {
            self.temperature = v;
        }
        if let Some(v) = o.lambda_cu {
            self.lambda_cu = v;
        }
        if let Some(v) = o.lambda_ce {
            self.lambda_ce = v;
        }
        if let Some(v) = &o.weights {
            self.weights = v.clone();
        }
        if let Some(v) = &o.optimizer {
            self.optimizer = v.clone();
        }
        if let Some(v) = o.momentum {
            self.momentum = v;
        }
    }
}

impl Default for UnlearnSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// Partial per-method override of the unlearning section.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnOverride {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub forget_batch: Option<usize>,
    pub retain_batch: Option<usize>,
    pub omega: Option<usize>,
    pub temperature: Option<f64>,
    pub lambda_cu: Option<f64>,
    pub lambda_ce: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub optimizer: Option<String>,
    pub momentum: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "EvalSection::default_knn_k")]
    pub knn_k: usize,
    #[serde(default = "EvalSection::default_probe_iters")]
    pub probe_iters: usize,
    #[serde(default = "EvalSection::default_probe_lr")]
    pub probe_lr: f64,
    #[serde(default)]
    pub export_features: bool,
}

impl EvalSection {
    fn default_knn_k() -> usize {
        5
    }
    fn default_probe_iters() -> usize {
        300
    }
    fn default_probe_lr() -> f64 {
        0.05
    }

    pub fn options(&self) -> unlab_core::eval::EvalOptions {
        unlab_core::eval::EvalOptions {
            knn_k: self.knn_k,
            probe: unlab_core::eval::ProbeConfig { iters: self.probe_iters, lr: self.probe_lr },
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "BenchSection::default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "BenchSection::default_seeds")]
    pub seeds: Vec<u64>,
    /// Optional layer-weight schedules to sweep (each applied to `ec`).
    #[serde(default)]
    pub weight_schedules: Vec<Vec<f64>>,
}

impl BenchSection {
    fn default_methods() -> Vec<String> {
        vec!["ec".into(), "cu".into()]
    }
    fn default_seeds() -> Vec<u64> {
        vec![1, 2, 3]
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// The full experiment configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub downstream: DownstreamSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub supcon: SupconSection,
    #[serde(default)]
    pub unlearn: UnlearnSection,
    #[serde(default)]
    pub unlearn_overrides: BTreeMap<String, UnlearnOverride>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bench: BenchSection,
    /// Hash of the config file contents; set on load, not read from TOML.
    #[serde(skip)]
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> RunResult<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| RunError::Config(format!("read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| RunError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        cfg.hash = digest.iter().map(|b| format!("{b:02x}")).collect::<String>()[..16].into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> RunResult<()> {
        let field = |name: &str, ok: bool, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(RunError::Config(format!("{name}: {why}")))
            }
        };
        field("dataset.kind", matches!(self.dataset.kind.as_str(), "blobs" | "file"),
              "expected \"blobs\" or \"file\"")?;
        if self.dataset.kind == "file" {
            field("dataset.train_path", self.dataset.train_path.is_some(), "required for kind = \"file\"")?;
            field("dataset.test_path", self.dataset.test_path.is_some(), "required for kind = \"file\"")?;
        }
        field("split.strategy", matches!(self.split.strategy.as_str(), "random" | "top-similarity"),
              "expected \"random\" or \"top-similarity\"")?;
        field(
            "split.forget_classes",
            self.split.forget_count(self.dataset.classes) < self.dataset.classes,
            "must be a proper subset of the classes",
        )?;
        field("model.stage_widths", self.model.stage_widths.len() >= 2, "need at least 2 stages")?;
        field(
            "unlearn.weights",
            self.unlearn.weights.len() == self.model.stage_widths.len(),
            "length must equal the number of stages",
        )?;
        field(
            "split.similarity_downstream",
            self.split.strategy != "top-similarity"
                || self.split.similarity_downstream < self.downstream.count,
            "downstream index out of range",
        )?;
        for (method, _) in self.unlearn_overrides.iter() {
            field(
                "unlearn_overrides",
                is_known_method(method),
                &format!("unknown method {method:?}"),
            )?;
        }
        Ok(())
    }

    /// Unlearning settings for one method, with per-method overrides applied.
    pub fn unlearn_for(&self, method: &str) -> UnlearnSection {
        let mut section = self.unlearn.clone();
        if let Some(o) = self.unlearn_overrides.get(method) {
            section.apply(o);
        }
        section
    }

    /// Root output directory for this config: <out_dir>/<hash>.
    pub fn run_root(&self, out_override: Option<&Path>) -> PathBuf {
        let base = out_override
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from(&self.out_dir));
        base.join(&self.hash)
    }
}

pub const KNOWN_METHODS: &[&str] =
    &["ec", "cu", "rl", "ga", "finetune", "plugin:ga", "plugin:cu"];

pub fn is_known_method(name: &str) -> bool {
    KNOWN_METHODS.contains(&name)
}
