//! Mini-batch training of D-PBN and AEC models with per-epoch evaluation.
//!
//! Per-sample work runs on the rayon pool in fixed-size chunks; chunk
//! results are merged in index order, so gradients and logs do not depend
//! on the thread count.

use std::fmt::Write as _;
use std::time::Instant;

use dpbn_core::{
    sample_gradient, AecAccumulator, AecNetwork, BatchAccumulator, DpbnNetwork, FailurePolicy, Matrix, Optimizer,
    SolverOptions, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{fft_shift_augment, ImageBatch};
use crate::rng::substream;

/// Samples handled by one task before its partial sums are merged.
pub const CHUNK: usize = 8;

const TAG_SHUFFLE: u64 = 0x5_u64;
const TAG_SHIFT: u64 = 0x6_u64;

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("training diverged at epoch {epoch}: non-finite loss or gradient")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Core(#[from] dpbn_core::Error),
}

/// Aggregate reconstruction quality of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean over samples and coordinates of `(x̂ − x)²`, every sample
    /// included (failed decodes contribute their best-iterate reconstruction).
    pub mse: f64,
    /// Fraction of samples whose decode succeeded at every layer.
    pub efficiency: f64,
    pub samples: usize,
}

/// Outcome of one mini-batch gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStep {
    pub grads: Vec<f64>,
    pub loss: f64,
    pub count: usize,
    pub used: usize,
    pub succeeded: usize,
}

/// What the training loop needs from a model.
pub trait Trainable: Sync {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]) -> Result<(), FitError>;
    /// Per-parameter learning rates.
    fn rates(&self, cfg: &TrainConfig) -> Vec<f64>;
    fn batch_step(&self, data: &Matrix, rows: &[usize], cfg: &TrainConfig) -> Result<BatchStep, FitError>;
    fn evaluate(&self, data: &Matrix, solver: SolverOptions) -> Result<Evaluation, FitError>;
}

impl Trainable for DpbnNetwork {
    fn params(&self) -> Vec<f64> {
        DpbnNetwork::params(self)
    }

    fn set_params(&mut self, p: &[f64]) -> Result<(), FitError> {
        Ok(DpbnNetwork::set_params(self, p)?)
    }

    fn rates(&self, cfg: &TrainConfig) -> Vec<f64> {
        cfg.rates(&self.weight_mask())
    }

    fn batch_step(&self, data: &Matrix, rows: &[usize], cfg: &TrainConfig) -> Result<BatchStep, FitError> {
        let plan = self.plan(cfg.solver)?;
        let parts = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = BatchAccumulator::new(self);
                for &r in chunk {
                    acc.push(&sample_gradient(self, &plan, data.row(r), cfg.failure_policy)?);
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>, dpbn_core::Error>>()?;
        let mut total = BatchAccumulator::new(self);
        for p in &parts {
            total.merge(p);
        }
        let (count, used, succeeded) = (total.count, total.used, total.succeeded);
        let (g, loss, _) = total.finish(self, cfg.weight_decay);
        Ok(BatchStep { grads: g.to_flat(), loss, count, used, succeeded })
    }

    fn evaluate(&self, data: &Matrix, solver: SolverOptions) -> Result<Evaluation, FitError> {
        let plan = self.plan(solver)?;
        let rows: Vec<usize> = (0..data.rows()).collect();
        let parts = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut sq = 0.0;
                let mut ok = 0usize;
                for &r in chunk {
                    let x = data.row(r);
                    let (x_hat, success) = self.autoencode_with(&plan, x)?;
                    sq += x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    ok += success as usize;
                }
                Ok((sq, ok))
            })
            .collect::<Result<Vec<_>, dpbn_core::Error>>()?;
        Ok(summarize(&parts, data))
    }
}

impl Trainable for AecNetwork {
    fn params(&self) -> Vec<f64> {
        AecNetwork::params(self)
    }

    fn set_params(&mut self, p: &[f64]) -> Result<(), FitError> {
        Ok(AecNetwork::set_params(self, p)?)
    }

    fn rates(&self, cfg: &TrainConfig) -> Vec<f64> {
        vec![cfg.learning_rate; self.param_count()]
    }

    fn batch_step(&self, data: &Matrix, rows: &[usize], cfg: &TrainConfig) -> Result<BatchStep, FitError> {
        let parts = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = AecAccumulator::new(self);
                for &r in chunk {
                    let (sq, g) = self.sample_gradient(data.row(r))?;
                    acc.push(sq, &g);
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>, dpbn_core::Error>>()?;
        let mut total = AecAccumulator::new(self);
        for p in &parts {
            total.merge(p);
        }
        let count = total.count;
        let (loss, g) = total.finish(self, cfg.weight_decay);
        Ok(BatchStep { grads: g.flat, loss, count, used: count, succeeded: count })
    }

    fn evaluate(&self, data: &Matrix, _solver: SolverOptions) -> Result<Evaluation, FitError> {
        let rows: Vec<usize> = (0..data.rows()).collect();
        let parts = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut sq = 0.0;
                for &r in chunk {
                    let x = data.row(r);
                    sq += self.autoencode(x)?.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                }
                Ok((sq, chunk.len()))
            })
            .collect::<Result<Vec<_>, dpbn_core::Error>>()?;
        Ok(summarize(&parts, data))
    }
}

fn summarize(parts: &[(f64, usize)], data: &Matrix) -> Evaluation {
    let mut sq = 0.0;
    let mut ok = 0usize;
    for &(s, o) in parts {
        sq += s;
        ok += o;
    }
    let n = data.rows();
    Evaluation {
        mse: if n > 0 { sq / (n * data.cols()) as f64 } else { 0.0 },
        efficiency: if n > 0 { ok as f64 / n as f64 } else { 1.0 },
        samples: n,
    }
}

/// One evaluation row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Sampling efficiency on the test set.
    pub efficiency: f64,
    pub wall_seconds: f64,
    /// Sampling efficiency on the (unaugmented) training set.
    pub train_efficiency: f64,
    /// Training samples left out of the gradient during this epoch.
    pub train_skipped: usize,
}

pub const LOG_COLUMNS: &str = "epoch,train_mse,test_mse,efficiency,wall_seconds,train_efficiency,train_skipped";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    /// Lines written as `# …` comments above the column header.
    pub header: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            let _ = writeln!(s, "# {h}");
        }
        let _ = writeln!(s, "{LOG_COLUMNS}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.train_mse, r.test_mse, r.efficiency, r.wall_seconds, r.train_efficiency, r.train_skipped
            );
        }
        s
    }

    /// Parse the rows of a log written by [`to_csv`](Self::to_csv).
    pub fn parse_rows(text: &str) -> Vec<LogRow> {
        text.lines()
            .filter(|l| !l.starts_with('#') && *l != LOG_COLUMNS && !l.is_empty())
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                Some(LogRow {
                    epoch: f.first()?.parse().ok()?,
                    train_mse: f.get(1)?.parse().ok()?,
                    test_mse: f.get(2)?.parse().ok()?,
                    efficiency: f.get(3)?.parse().ok()?,
                    wall_seconds: f.get(4)?.parse().ok()?,
                    train_efficiency: f.get(5)?.parse().ok()?,
                    train_skipped: f.get(6)?.parse().ok()?,
                })
            })
            .collect()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Loop settings that are not part of the optimization problem itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Maximum circular shift (pixels) applied to training images each epoch.
    pub max_shift: f64,
    pub eval_every: usize,
    pub record_wall_time: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_shift: 0.0, eval_every: 1, record_wall_time: false }
    }
}

/// Train `model` on `train`, evaluating on the clean training set and on
/// `test` before the first epoch, every `eval_every` epochs and after the
/// last. `on_row` sees each log row as it is produced.
pub fn fit<M: Trainable, F: FnMut(&LogRow)>(
    model: &mut M,
    train: &ImageBatch,
    test: &ImageBatch,
    cfg: &TrainConfig,
    opts: &FitOptions,
    mut on_row: F,
) -> Result<TrainingLog, FitError> {
    cfg.validate()?;
    let start = Instant::now();
    let wall = |start: &Instant| if opts.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let mut log = TrainingLog::default();
    let eval_row = |model: &M, epoch: usize, skipped: usize, wall_seconds: f64| -> Result<LogRow, FitError> {
        let tr = model.evaluate(&train.samples, cfg.solver)?;
        let te = model.evaluate(&test.samples, cfg.solver)?;
        if !tr.mse.is_finite() {
            return Err(FitError::Diverged { epoch });
        }
        Ok(LogRow {
            epoch,
            train_mse: tr.mse,
            test_mse: te.mse,
            efficiency: te.efficiency,
            wall_seconds,
            train_efficiency: tr.efficiency,
            train_skipped: skipped,
        })
    };
    let row = eval_row(model, 0, 0, wall(&start))?;
    on_row(&row);
    log.rows.push(row);

    let rates = model.rates(cfg);
    let mut opt = Optimizer::new(cfg.optimizer, rates.len());
    let mut params = model.params();
    let n = train.len();
    for epoch in 1..=cfg.epochs {
        let data = if opts.max_shift > 0.0 {
            let shift_seed: u64 = substream(cfg.seed, TAG_SHIFT, epoch as u64).random();
            fft_shift_augment(train, opts.max_shift, shift_seed)
        } else {
            train.clone()
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, TAG_SHUFFLE, epoch as u64));
        let mut skipped = 0usize;
        for rows in order.chunks(cfg.batch_size) {
            let step = model.batch_step(&data.samples, rows, cfg)?;
            skipped += step.count - step.used;
            if !step.loss.is_finite() || step.grads.iter().any(|g| !g.is_finite()) {
                return Err(FitError::Diverged { epoch });
            }
            if step.used == 0 {
                continue;
            }
            opt.step(&mut params, &step.grads, &rates)?;
            model.set_params(&params)?;
        }
        if epoch % opts.eval_every == 0 || epoch == cfg.epochs {
            let row = eval_row(model, epoch, skipped, wall(&start))?;
            on_row(&row);
            log.rows.push(row);
        }
    }
    Ok(log)
}

/// Default failure policy name as written in log headers.
pub fn policy_name(p: FailurePolicy) -> &'static str {
    match p {
        FailurePolicy::Skip => "skip",
        FailurePolicy::BestIterate => "best_iterate",
    }
}
