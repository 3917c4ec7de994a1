//! JSON run configuration. Unknown keys are rejected; relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use dpbn_core::{FailurePolicy, MaxEntKind, NetworkSpec, OptimizerKind, SolverOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub output: OutputConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    /// [`hash`](Self::hash) of the file as written, before path resolution.
    #[serde(skip)]
    pub source_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_classes")]
    pub classes: Vec<u8>,
    /// Training samples per class.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    /// Test samples per class; `null` keeps every test sample of the classes.
    #[serde(default)]
    pub test_per_class: Option<usize>,
    #[serde(default = "default_dither")]
    pub dither_scale: f64,
    /// Optional directory for preprocessed-batch caches.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_classes() -> Vec<u8> {
    vec![3, 8, 9]
}
fn default_per_class() -> usize {
    500
}
fn default_dither() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dpbn,
    Aec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseName {
    Linear,
    TruncGauss,
    TruncExpon,
}

impl From<BaseName> for MaxEntKind {
    fn from(b: BaseName) -> Self {
        match b {
            BaseName::Linear => MaxEntKind::Linear,
            BaseName::TruncGauss => MaxEntKind::TruncGauss,
            BaseName::TruncExpon => MaxEntKind::TruncExpon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    /// TCA component count per layer (D-PBN only); 1 is a plain scaled and
    /// shifted base activation.
    #[serde(default)]
    pub components: Option<Vec<usize>>,
    /// Base kind per layer (D-PBN only); default linear on the input,
    /// truncated Gaussian elsewhere.
    #[serde(default)]
    pub bases: Option<Vec<BaseName>>,
    #[serde(default)]
    pub shared_tca: bool,
    /// AEC only.
    #[serde(default)]
    pub tied: bool,
}

fn default_dims() -> Vec<usize> {
    vec![784, 64, 32, 16]
}

impl ModelConfig {
    pub fn network_spec(&self) -> Result<NetworkSpec, ConfigError> {
        let layers = self.dims.len().saturating_sub(1);
        let comps = self.components.clone().unwrap_or_else(|| vec![1; layers]);
        let mut spec = NetworkSpec::new(&self.dims, &comps);
        if let Some(b) = &self.bases {
            spec.bases = b.iter().map(|&k| k.into()).collect();
        }
        spec.shared_tca = self.shared_tca;
        spec.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Skip,
    BestIterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerName {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "solver_tol")]
    pub tol: f64,
    #[serde(default = "solver_iter")]
    pub max_iter: usize,
    #[serde(default = "solver_damping")]
    pub damping: usize,
    #[serde(default = "solver_ridge")]
    pub ridge: f64,
}

fn solver_tol() -> f64 {
    SolverOptions::default().tol
}
fn solver_iter() -> usize {
    SolverOptions::default().max_iter
}
fn solver_damping() -> usize {
    SolverOptions::default().damping
}
fn solver_ridge() -> f64 {
    SolverOptions::default().ridge
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { tol: solver_tol(), max_iter: solver_iter(), damping: solver_damping(), ridge: solver_ridge() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_policy")]
    pub failure_policy: PolicyName,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerName,
    #[serde(default = "default_tca_mult")]
    pub tca_lr_multiplier: f64,
    #[serde(default)]
    pub solver: SolverSection,
    /// Maximum circular shift in pixels; 0 disables augmentation.
    #[serde(default = "default_shift")]
    pub max_shift: f64,
    /// Evaluate every this many epochs (plus the first and last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Write elapsed seconds to the log; off gives byte-reproducible logs.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    288
}
fn default_policy() -> PolicyName {
    PolicyName::Skip
}
fn default_optimizer() -> OptimizerName {
    OptimizerName::Adam { beta1: beta1(), beta2: beta2(), eps: adam_eps() }
}
fn default_tca_mult() -> f64 {
    0.1
}
fn default_shift() -> f64 {
    1.0
}
fn default_eval_every() -> usize {
    10
}
fn default_true() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed,
            failure_policy: match self.failure_policy {
                PolicyName::Skip => FailurePolicy::Skip,
                PolicyName::BestIterate => FailurePolicy::BestIterate,
            },
            optimizer: match self.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam { beta1, beta2, eps } => OptimizerKind::Adam { beta1, beta2, eps },
            },
            tca_lr_multiplier: self.tca_lr_multiplier,
            solver: SolverOptions {
                tol: self.solver.tol,
                max_iter: self.solver.max_iter,
                damping: self.solver.damping,
                ridge: self.solver.ridge,
            },
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        if self.eval_every == 0 {
            return Err(ConfigError::Invalid("train: eval_every must be at least 1".into()));
        }
        if !(self.max_shift >= 0.0) {
            return Err(ConfigError::Invalid("train: max_shift must be non-negative".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub model: PathBuf,
    pub log: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "gc_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "gc_components")]
    pub components: Vec<usize>,
    /// All-linear network (bases and single-component TCAs).
    #[serde(default)]
    pub linear: bool,
    #[serde(default = "gc_batch")]
    pub batch: usize,
    #[serde(default = "gc_eps")]
    pub eps: f64,
    #[serde(default = "gc_threshold")]
    pub threshold: f64,
    /// Test fixture: perturb one analytic gradient entry before comparing.
    #[serde(default)]
    pub corrupt: bool,
}

fn gc_dims() -> Vec<usize> {
    vec![12, 8, 5, 3]
}
fn gc_components() -> Vec<usize> {
    vec![2, 3, 3]
}
fn gc_batch() -> usize {
    4
}
fn gc_eps() -> f64 {
    1e-5
}
fn gc_threshold() -> f64 {
    1e-4
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Parse, validate and resolve relative paths.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::from_json(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.source_hash = cfg.hash();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train_images);
        fix(&mut self.data.train_labels);
        fix(&mut self.data.test_images);
        fix(&mut self.data.test_labels);
        if let Some(c) = &mut self.data.cache_dir {
            fix(c);
        }
        fix(&mut self.output.model);
        fix(&mut self.output.log);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data.classes.is_empty() {
            return Err(ConfigError::Invalid("data: classes must not be empty".into()));
        }
        if !(self.data.dither_scale > 0.0) {
            return Err(ConfigError::Invalid("data: dither_scale must be positive".into()));
        }
        match self.model.kind {
            ModelKind::Dpbn => {
                self.model.network_spec()?;
            }
            ModelKind::Aec => {
                if self.model.dims.len() < 2 || self.model.dims.contains(&0) {
                    return Err(ConfigError::Invalid("model: dims".into()));
                }
            }
        }
        self.train.train_config(self.seed)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
