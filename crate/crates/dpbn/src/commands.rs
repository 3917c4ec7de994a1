//! The `train`, `eval`, `reconstruct` and `gradcheck` commands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dpbn_core::training::{finite_diff_compare, gradcheck_solver};
use dpbn_core::{
    backward_gradients, AecNetwork, DecoderMode, DpbnNetwork, MaxEntKind, Matrix, NetworkSpec, SolverOptions,
    TrainConfig,
};
use rand::Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, GradcheckConfig, ModelKind, RunConfig};
use crate::data::{self, sigmoid, DataError, ImageBatch};
use crate::fit::{self, FitError, FitOptions, Trainable, TrainingLog};
use crate::model_file::{self, Model, ModelError};
use crate::rng::stream;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("model file error: {0}")]
    Model(#[from] ModelError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Diverged(FitError),
    #[error("numeric error: {0}")]
    Numeric(dpbn_core::Error),
    #[error("gradient check failed: max relative error {0:e} exceeds threshold")]
    GradcheckFailed(f64),
}

impl CliError {
    /// Process exit status: 1 for bad configs, model files and failed
    /// gradient checks; 2 for data and I/O problems; 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(_) | CliError::GradcheckFailed(_) | CliError::Numeric(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Diverged { .. } => CliError::Diverged(e),
            FitError::Core(c) => CliError::Numeric(c),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &ov.out {
        let name = |p: &Path, d: &str| p.file_name().map(PathBuf::from).unwrap_or_else(|| d.into());
        cfg.output.model = dir.join(name(&cfg.output.model, "model.dpbn"));
        cfg.output.log = dir.join(name(&cfg.output.log, "log.csv"));
    }
    if let Some(m) = &ov.model {
        cfg.output.model = m.clone();
    }
    Ok(cfg)
}

/// Preprocessed training and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: ImageBatch,
    pub test: ImageBatch,
}

/// Load, subset, dither and gaussianify both splits, going through the
/// cache directory when one is configured.
pub fn prepare_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    let split = |name: &str, images: &Path, labels: &Path, per_class: Option<usize>, tag: u64| {
        let mut key_src = serde_json::to_vec(d).expect("data config serializes");
        key_src.extend_from_slice(name.as_bytes());
        key_src.extend_from_slice(&cfg.seed.to_le_bytes());
        let key: [u8; 32] = Sha256::digest(&key_src).into();
        let cache = d.cache_dir.as_ref().map(|c| c.join(format!("{name}.dpbd")));
        if let Some(p) = &cache {
            if p.exists() {
                if let Some(b) = data::read_cache(p, &key)? {
                    return Ok::<_, CliError>(b);
                }
            }
        }
        let seed = cfg.seed.wrapping_add(tag);
        let raw = data::load_idx(images, labels)?;
        let subset = data::select_subset(&raw, &d.classes, per_class, seed)?;
        let g = data::gaussianify(&data::dither(&subset, d.dither_scale, seed)?)?;
        if let Some(p) = &cache {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            data::write_cache(p, &g, &key)?;
        }
        Ok(g)
    };
    Ok(Dataset {
        train: split("train", &d.train_images, &d.train_labels, Some(d.per_class), 0)?,
        test: split("test", &d.test_images, &d.test_labels, d.test_per_class, 1)?,
    })
}

pub fn build_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let mut rng = stream(cfg.seed, 0x1417);
    Ok(match cfg.model.kind {
        ModelKind::Dpbn => {
            let spec = cfg.model.network_spec()?;
            Model::Dpbn(DpbnNetwork::random(&spec, &mut rng).map_err(CliError::Numeric)?)
        }
        ModelKind::Aec => {
            let mode = if cfg.model.tied { DecoderMode::Tied } else { DecoderMode::Untied };
            Model::Aec(AecNetwork::random(&cfg.model.dims, mode, &mut rng).map_err(CliError::Numeric)?)
        }
    })
}

fn describe(model: &Model) -> String {
    let dims = |d: Vec<usize>| d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-");
    match model {
        Model::Dpbn(n) => {
            let comps: Vec<String> = n.layers().iter().map(|l| l.tca.components().to_string()).collect();
            let bases: Vec<&str> = n.layers().iter().map(|l| l.kind().name()).collect();
            format!(
                "model=dpbn dims={} tca_components={} bases={} shared_tca={} params={}",
                dims(n.dims()),
                comps.join("/"),
                bases.join("/"),
                n.layers()[0].tca.shared(),
                n.param_count()
            )
        }
        Model::Aec(n) => format!("model=aec dims={} decoder={:?} params={}", dims(n.dims()), n.mode(), n.param_count()),
    }
}

fn log_header(cfg: &RunConfig, tc: &TrainConfig, model: &Model, data: &Dataset) -> Vec<String> {
    vec![
        "dpbn training log".into(),
        describe(model),
        format!("config_sha256={} seed={}", cfg.source_hash, cfg.seed),
        "mse=mean over samples and coordinates of squared error, logit domain; test rows include failed decodes".into(),
        format!(
            "train={} samples of classes {:?}; test={} samples (per_class={})",
            data.train.len(),
            cfg.data.classes,
            data.test.len(),
            cfg.data.test_per_class.map_or("all".into(), |v| v.to_string())
        ),
        format!(
            "epochs={} batch_size={} learning_rate={} tca_lr_multiplier={} weight_decay={} failure_policy={} max_shift={}",
            tc.epochs,
            tc.batch_size,
            tc.learning_rate,
            tc.tca_lr_multiplier,
            tc.weight_decay,
            fit::policy_name(tc.failure_policy),
            cfg.train.max_shift
        ),
    ]
}

/// Result of a completed `train`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
    pub model_path: PathBuf,
    pub log_path: PathBuf,
}

pub fn cmd_train(config: &Path, ov: &Overrides, verbose: bool) -> Result<TrainOutcome, CliError> {
    let cfg = load_config(config, ov)?;
    let tc = cfg.train.train_config(cfg.seed)?;
    let data = prepare_data(&cfg)?;
    let mut model = build_model(&cfg)?;
    let opts = FitOptions {
        max_shift: cfg.train.max_shift,
        eval_every: cfg.train.eval_every,
        record_wall_time: cfg.train.record_wall_time,
    };
    let header = log_header(&cfg, &tc, &model, &data);
    let report = |r: &fit::LogRow| {
        if verbose {
            eprintln!(
                "epoch {:>4}  train_mse {:.6}  test_mse {:.6}  efficiency {:.4}  skipped {}  {:.1}s",
                r.epoch, r.train_mse, r.test_mse, r.efficiency, r.train_skipped, r.wall_seconds
            );
        }
    };
    let mut log = match &mut model {
        Model::Dpbn(n) => fit::fit(n, &data.train, &data.test, &tc, &opts, report)?,
        Model::Aec(n) => fit::fit(n, &data.train, &data.test, &tc, &opts, report)?,
    };
    log.header = header;
    for p in [&cfg.output.model, &cfg.output.log] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    model_file::save(&cfg.output.model, &model)?;
    fs::write(&cfg.output.log, log.to_csv()).map_err(io_err(&cfg.output.log))?;
    Ok(TrainOutcome { model, log, model_path: cfg.output.model, log_path: cfg.output.log })
}

/// Train and test MSE plus test-set sampling efficiency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mse_train: f64,
    pub mse_test: f64,
    pub efficiency: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "mse_train={} mse_test={} efficiency={}", self.mse_train, self.mse_test, self.efficiency)
    }
}

fn solver_of(cfg: &RunConfig) -> Result<SolverOptions, CliError> {
    Ok(cfg.train.train_config(cfg.seed)?.solver)
}

fn evaluate_model(model: &Model, x: &Matrix, solver: SolverOptions) -> Result<fit::Evaluation, CliError> {
    Ok(match model {
        Model::Dpbn(n) => n.evaluate(x, solver)?,
        Model::Aec(n) => n.evaluate(x, solver)?,
    })
}

fn model_path(cfg: &RunConfig, ov: &Overrides) -> PathBuf {
    ov.model.clone().unwrap_or_else(|| cfg.output.model.clone())
}

pub fn cmd_eval(config: &Path, ov: &Overrides) -> Result<EvalReport, CliError> {
    let cfg = load_config(config, ov)?;
    let model = model_file::load(&model_path(&cfg, ov))?;
    let data = prepare_data(&cfg)?;
    check_dims(&model, &data)?;
    let solver = solver_of(&cfg)?;
    let tr = evaluate_model(&model, &data.train.samples, solver)?;
    let te = evaluate_model(&model, &data.test.samples, solver)?;
    Ok(EvalReport { mse_train: tr.mse, mse_test: te.mse, efficiency: te.efficiency })
}

fn check_dims(model: &Model, data: &Dataset) -> Result<(), CliError> {
    if model.input_dim() != data.test.samples.cols() {
        return Err(ModelError::Malformed(format!(
            "model input dimension {} does not match data dimension {}",
            model.input_dim(),
            data.test.samples.cols()
        ))
        .into());
    }
    Ok(())
}

/// 8-bit binary PGM of a logit-domain image.
pub fn pgm(image: &[f64], shape: (usize, usize)) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", shape.1, shape.0).into_bytes();
    out.extend(image.iter().map(|&v| (sigmoid(v) * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Write originals, reconstructions and a per-sample error table for the
/// first `count` test samples. Returns the number written.
pub fn cmd_reconstruct(config: &Path, ov: &Overrides, count: Option<usize>) -> Result<usize, CliError> {
    let cfg = load_config(config, &Overrides { out: None, ..ov.clone() })?;
    let model = model_file::load(&model_path(&cfg, ov))?;
    let data = prepare_data(&cfg)?;
    check_dims(&model, &data)?;
    let out = ov.out.clone().unwrap_or_else(|| PathBuf::from("reconstructions"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let solver = solver_of(&cfg)?;
    let n = count.unwrap_or(data.test.len()).min(data.test.len());
    let plan = match &model {
        Model::Dpbn(net) => Some(net.plan(solver).map_err(CliError::Numeric)?),
        Model::Aec(_) => None,
    };
    let table_path = out.join("reconstruct.csv");
    let mut table = String::from("index,label,squared_error,mse,success\n");
    for i in 0..n {
        let x = data.test.samples.row(i);
        let (x_hat, success) = match (&model, &plan) {
            (Model::Dpbn(net), Some(plan)) => net.autoencode_with(plan, x).map_err(CliError::Numeric)?,
            (Model::Aec(net), _) => (net.autoencode(x).map_err(CliError::Numeric)?, true),
            _ => unreachable!("plan exists for D-PBN models"),
        };
        let sq: f64 = x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        table.push_str(&format!("{i},{},{sq},{},{}\n", data.test.labels[i], sq / x.len() as f64, success as u8));
        for (name, img) in [("original", x), ("reconstruction", &x_hat[..])] {
            let p = out.join(format!("{i:04}_{name}.pgm"));
            fs::write(&p, pgm(img, data.test.shape)).map_err(io_err(&p))?;
        }
    }
    let mut f = fs::File::create(&table_path).map_err(io_err(&table_path))?;
    f.write_all(table.as_bytes()).map_err(io_err(&table_path))?;
    Ok(n)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    gradcheck: GradcheckConfig,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub threshold: f64,
    pub params: usize,
}

/// Settings from a config file: either a full run config or a document
/// holding only `seed` and `gradcheck`.
pub fn gradcheck_settings(config: Option<&Path>) -> Result<(u64, GradcheckConfig), CliError> {
    let Some(path) = config else {
        return Ok((0, GradcheckConfig::default()));
    };
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let parse_err = |source| ConfigError::Parse { path: path.into(), source };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    if value.get("data").is_some() {
        let c = RunConfig::from_json(&text).map_err(parse_err)?;
        Ok((c.seed, c.gradcheck))
    } else {
        let g: GradcheckFile = serde_json::from_value(value).map_err(parse_err)?;
        Ok((g.seed, g.gradcheck))
    }
}

/// Build the check network: random weights, TCA parameters moved away
/// from neutral so every partial is exercised.
pub fn gradcheck_network(seed: u64, g: &GradcheckConfig) -> Result<DpbnNetwork, CliError> {
    let layers = g.dims.len().saturating_sub(1);
    let mut spec = if g.linear {
        let mut s = NetworkSpec::new(&g.dims, &vec![1; layers]);
        s.bases = vec![MaxEntKind::Linear; layers];
        s
    } else {
        NetworkSpec::new(&g.dims, &g.components)
    };
    spec.shared_tca = false;
    spec.validate().map_err(|e| ConfigError::Invalid(format!("gradcheck: {e}")))?;
    let mut rng = stream(seed, 0x9c);
    let mut net = DpbnNetwork::random(&spec, &mut rng).map_err(CliError::Numeric)?;
    if !g.linear {
        for l in net.layers_mut() {
            for u in l.tca.units_mut() {
                u.update(|a, w, b| {
                    a.iter_mut().skip(1).for_each(|v| *v = rng.random_range(-2.0..0.0));
                    w.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
                    b.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
                });
            }
        }
    }
    Ok(net)
}

pub fn cmd_gradcheck(config: Option<&Path>) -> Result<GradcheckReport, CliError> {
    let (seed, g) = gradcheck_settings(config)?;
    let net = gradcheck_network(seed, &g)?;
    let mut rng = stream(seed, 0x9d);
    let d = net.input_dim();
    let x = Matrix::from_vec(g.batch, d, (0..g.batch * d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .map_err(CliError::Numeric)?;
    let tc = TrainConfig { solver: gradcheck_solver(), ..TrainConfig::default() };
    let (grads, _, _) = backward_gradients(&net, &x, &tc).map_err(CliError::Numeric)?;
    let mut flat = grads.to_flat();
    if g.corrupt {
        let i = (0..flat.len()).max_by(|&a, &b| flat[a].abs().total_cmp(&flat[b].abs())).unwrap_or(0);
        flat[i] = 1.1 * flat[i] + 1e-3;
    }
    let err = finite_diff_compare(&net, &x, g.eps, &tc, &flat).map_err(CliError::Numeric)?;
    let report = GradcheckReport { max_rel_err: err, threshold: g.threshold, params: flat.len() };
    if err <= g.threshold {
        Ok(report)
    } else {
        Err(CliError::GradcheckFailed(err))
    }
}
