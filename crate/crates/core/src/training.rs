//! Reconstruction loss and its gradient with respect to every weight and
//! TCA parameter.
//!
//! The backward pass is reverse-mode differentiation through
//! encode → decode. Two node types need care:
//!
//! * TCA inversion `x = f⁻¹(y; θ)`: `∂x/∂y = 1/f′(x)` and
//!   `∂x/∂θ = −(∂f/∂θ)(x) / f′(x)`.
//! * Saddle solve `û = λ(W h*)` with `W'λ(W h*) = t`: by the implicit
//!   function theorem, with `a = W h*`, `D = diag(λ′(a))`, `J = W'DW` and an
//!   upstream cotangent `g` on `û`,
//!
//!   ```text
//!   g_a = D g,   v = J⁻¹ W' g_a
//!   ∂L/∂t = v
//!   ∂L/∂W = (g_a − D W v) h*' − λ(a) v'
//!   ```
//!
//!   `J` is the factor the solver already produced at `h*`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::linalg::Matrix;
use crate::network::{DecodePlan, DpbnNetwork};
use crate::optim::OptimizerKind;
use crate::saddle::SolverOptions;

/// What to do with a sample whose decode failed at some layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    /// Leave it out of the loss and the gradient.
    #[default]
    Skip,
    /// Differentiate through the best iterate as if it had converged.
    BestIterate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty coefficient on weight matrices only.
    pub weight_decay: f64,
    pub seed: u64,
    pub failure_policy: FailurePolicy,
    pub optimizer: OptimizerKind,
    /// Learning-rate multiplier applied to TCA parameters.
    pub tca_lr_multiplier: f64,
    pub solver: SolverOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 288,
            weight_decay: 0.0,
            seed: 0,
            failure_policy: FailurePolicy::Skip,
            optimizer: OptimizerKind::default(),
            tca_lr_multiplier: 0.1,
            solver: SolverOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be non-negative"));
        }
        if !(self.tca_lr_multiplier >= 0.0) {
            return Err(Error::InvalidConfig("tca_lr_multiplier must be non-negative"));
        }
        self.solver.validate()
    }

    /// Per-parameter learning rates for a parameter vector with the given
    /// weight mask (see [`DpbnNetwork::weight_mask`]).
    pub fn rates(&self, weight_mask: &[bool]) -> Vec<f64> {
        weight_mask
            .iter()
            .map(|&w| if w { self.learning_rate } else { self.learning_rate * self.tca_lr_multiplier })
            .collect()
    }
}

/// Gradients shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// `∂L/∂W` per layer.
    pub weights: Vec<Matrix>,
    /// Per layer, flat `[unit][a_1..a_K, w_1..w_K, b_1..b_K]`.
    pub tca: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &DpbnNetwork) -> Self {
        Self {
            weights: net.layers().iter().map(|l| Matrix::zeros(l.in_dim(), l.out_dim())).collect(),
            tca: net.layers().iter().map(|l| vec![0.0; l.tca.param_count()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.tca.iter_mut().zip(&other.tca) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.scale(s);
        }
        for t in &mut self.tca {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Same order as [`DpbnNetwork::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, t) in self.weights.iter().zip(&self.tca) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(t);
        }
        out
    }
}

/// Squared error and gradient contribution of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient {
    /// `Σᵢ (x̂ᵢ − xᵢ)²`.
    pub sq_error: f64,
    pub success: bool,
    /// Gradient of `sq_error`; `None` when the failure policy skipped it.
    pub grads: Option<GradientSet>,
}

/// Mean over every sample and coordinate of `(x̂ − x)²`.
pub fn mse_loss(x_hat: &Matrix, x: &Matrix) -> Result<f64> {
    check_len(x.rows(), x_hat.rows())?;
    check_len(x.cols(), x_hat.cols())?;
    if x.rows() * x.cols() == 0 {
        return Ok(0.0);
    }
    let s: f64 = x_hat.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / (x.rows() * x.cols()) as f64)
}

/// Forward, backward and gradient of `Σᵢ (x̂ᵢ − xᵢ)²` for one sample.
pub fn sample_gradient(
    net: &DpbnNetwork,
    plan: &DecodePlan<'_>,
    x: &[f64],
    policy: FailurePolicy,
) -> Result<SampleGradient> {
    let (y, trace) = net.encode(x)?;
    let dec = net.decode_with(plan, &y)?;
    let sq_error: f64 = dec.x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    if !dec.success && policy == FailurePolicy::Skip {
        return Ok(SampleGradient { sq_error, success: false, grads: None });
    }

    let layers = net.layers();
    let mut grads = GradientSet::zeros_like(net);
    // cotangent on the reconstruction
    let mut g: Vec<f64> = dec.x_hat.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();

    for (i, layer) in layers.iter().enumerate() {
        let dl = &dec.layers[i];
        let k = layer.tca.components();
        let tca_grad = &mut grads.tca[i];

        // TCA inversion: inverted = f⁻¹(û)
        let mut g_uhat = vec![0.0; layer.in_dim()];
        for (j, &xj) in dl.inverted.iter().enumerate() {
            let unit = layer.tca.unit(j);
            let fp = unit.deriv(xj);
            let s = g[j] / fp;
            g_uhat[j] = s;
            let off = layer.tca.unit_index(j) * 3 * k;
            let (da, rest) = tca_grad[off..off + 3 * k].split_at_mut(k);
            let (dw, db) = rest.split_at_mut(k);
            unit.accumulate_param_grads(xj, -s, da, dw, db);
        }

        // saddle node: û = λ(W h*)
        let w = &layer.weights;
        let kind = layer.kind();
        let h = &dl.solve.h;
        let a = w.mul_vec(h);
        let mut lam = vec![0.0; a.len()];
        let mut d = vec![0.0; a.len()];
        for (idx, &ai) in a.iter().enumerate() {
            let (l, dv) = kind.lambda_and_deriv(ai);
            lam[idx] = l;
            d[idx] = dv;
        }
        let g_a: Vec<f64> = g_uhat.iter().zip(&d).map(|(gu, di)| gu * di).collect();
        let mut v = w.mul_t_vec(&g_a);
        dl.solve.factor.solve_in_place(&mut v);
        let wv = w.mul_vec(&v);
        let left: Vec<f64> = g_a.iter().zip(&d).zip(&wv).map(|((ga, di), wvi)| ga - di * wvi).collect();
        let gw = &mut grads.weights[i];
        gw.add_outer(1.0, &left, h);
        gw.add_outer(-1.0, &lam, &v);

        // v is the cotangent on this layer's target: the inverted output of
        // the layer above, or the bottleneck
        g = v;
    }

    // encoder, from the bottleneck down
    for (i, layer) in layers.iter().enumerate().rev() {
        // z_{i+1} = W_i' u_i
        grads.weights[i].add_outer(1.0, &trace.tca_out[i], &g);
        let g_u = layer.weights.mul_vec(&g);
        if i == 0 {
            // the input itself is not a parameter
            accumulate_tca_forward(layer, &trace.tca_in[0], &g_u, &mut grads.tca[0]);
            break;
        }
        g = accumulate_tca_forward(layer, &trace.tca_in[i], &g_u, &mut grads.tca[i]);
    }

    Ok(SampleGradient { sq_error, success: dec.success, grads: Some(grads) })
}

/// Backprop through `u = TCA(z)`: accumulate parameter gradients, return `∂L/∂z`.
fn accumulate_tca_forward(
    layer: &crate::network::Layer,
    z: &[f64],
    g_u: &[f64],
    out: &mut [f64],
) -> Vec<f64> {
    let k = layer.tca.components();
    let mut g_z = vec![0.0; z.len()];
    for (j, (&zj, &gj)) in z.iter().zip(g_u).enumerate() {
        let off = layer.tca.unit_index(j) * 3 * k;
        let (da, rest) = out[off..off + 3 * k].split_at_mut(k);
        let (dw, db) = rest.split_at_mut(k);
        let fp = layer.tca.unit(j).accumulate_param_grads(zj, gj, da, dw, db);
        g_z[j] = gj * fp;
    }
    g_z
}

/// Running sums over a batch. Accumulators for disjoint slices of a batch
/// can be [`merge`](Self::merge)d; merging in a fixed order keeps results
/// independent of how work was split across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAccumulator {
    pub grads: GradientSet,
    pub sq_error: f64,
    /// Samples that contributed to the gradient.
    pub used: usize,
    /// Samples whose decode succeeded.
    pub succeeded: usize,
    pub count: usize,
}

impl BatchAccumulator {
    pub fn new(net: &DpbnNetwork) -> Self {
        Self { grads: GradientSet::zeros_like(net), sq_error: 0.0, used: 0, succeeded: 0, count: 0 }
    }

    pub fn push(&mut self, s: &SampleGradient) {
        self.count += 1;
        if s.success {
            self.succeeded += 1;
        }
        if let Some(g) = &s.grads {
            self.grads.add_assign(g);
            self.sq_error += s.sq_error;
            self.used += 1;
        }
    }

    pub fn merge(&mut self, other: &BatchAccumulator) {
        self.grads.add_assign(&other.grads);
        self.sq_error += other.sq_error;
        self.used += other.used;
        self.succeeded += other.succeeded;
        self.count += other.count;
    }

    /// Gradient of the mean squared error over contributing samples plus
    /// weight decay, with `(loss, efficiency)`.
    pub fn finish(mut self, net: &DpbnNetwork, weight_decay: f64) -> (GradientSet, f64, f64) {
        let n = net.input_dim() as f64;
        let loss = if self.used > 0 {
            self.grads.scale(1.0 / (self.used as f64 * n));
            self.sq_error / (self.used as f64 * n)
        } else {
            0.0
        };
        if weight_decay > 0.0 {
            for (g, l) in self.grads.weights.iter_mut().zip(net.layers()) {
                for (gi, wi) in g.as_mut_slice().iter_mut().zip(l.weights.as_slice()) {
                    *gi += weight_decay * wi;
                }
            }
        }
        let efficiency = if self.count > 0 { self.succeeded as f64 / self.count as f64 } else { 1.0 };
        (self.grads, loss, efficiency)
    }
}

/// Combine per-sample results, in order, into the batch gradient of the
/// mean squared error, plus weight decay. Returns `(gradients, loss,
/// efficiency, used)` where `loss` averages the samples that contributed.
pub fn reduce_batch<I>(net: &DpbnNetwork, samples: I, weight_decay: f64) -> (GradientSet, f64, f64, usize)
where
    I: IntoIterator<Item = SampleGradient>,
{
    let mut acc = BatchAccumulator::new(net);
    for s in samples {
        acc.push(&s);
    }
    let used = acc.used;
    let (g, loss, eff) = acc.finish(net, weight_decay);
    (g, loss, eff, used)
}

/// Gradient of the batch reconstruction MSE (plus weight decay on `W`).
/// Returns `(gradients, loss, efficiency)`.
pub fn backward_gradients(
    net: &DpbnNetwork,
    x_batch: &Matrix,
    cfg: &TrainConfig,
) -> Result<(GradientSet, f64, f64)> {
    check_len(net.input_dim(), x_batch.cols())?;
    let plan = net.plan(cfg.solver)?;
    let samples = (0..x_batch.rows())
        .map(|r| sample_gradient(net, &plan, x_batch.row(r), cfg.failure_policy))
        .collect::<Result<Vec<_>>>()?;
    let (g, loss, eff, _) = reduce_batch(net, samples, cfg.weight_decay);
    Ok((g, loss, eff))
}

/// Reconstruction MSE of a batch under a failure policy, with efficiency.
pub fn batch_loss(net: &DpbnNetwork, x_batch: &Matrix, cfg: &TrainConfig) -> Result<(f64, f64)> {
    check_len(net.input_dim(), x_batch.cols())?;
    let plan = net.plan(cfg.solver)?;
    let mut sq = 0.0;
    let mut used = 0usize;
    let mut ok = 0usize;
    for r in 0..x_batch.rows() {
        let x = x_batch.row(r);
        let (x_hat, success) = net.autoencode_with(&plan, x)?;
        if success {
            ok += 1;
        }
        if success || cfg.failure_policy == FailurePolicy::BestIterate {
            sq += x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            used += 1;
        }
    }
    let loss = if used > 0 { sq / (used * x_batch.cols()) as f64 } else { 0.0 };
    let eff = if x_batch.rows() > 0 { ok as f64 / x_batch.rows() as f64 } else { 1.0 };
    Ok((loss, eff))
}

/// Solver settings used by the gradient checker: tight enough that solve
/// noise stays far below the finite-difference step.
pub fn gradcheck_solver() -> SolverOptions {
    SolverOptions { tol: 1e-12, ..SolverOptions::default() }
}

/// Floor on the denominator of the relative error, so entries whose true
/// gradient is ~0 are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Worst relative discrepancy between analytic gradients and central
/// differences of the batch MSE over every parameter.
pub fn finite_diff_check(net: &DpbnNetwork, x_batch: &Matrix, eps: f64) -> Result<f64> {
    let cfg = TrainConfig { solver: gradcheck_solver(), ..TrainConfig::default() };
    let (analytic, _, _) = backward_gradients(net, x_batch, &cfg)?;
    finite_diff_compare(net, x_batch, eps, &cfg, &analytic.to_flat())
}

/// Compare a supplied flat gradient against central differences.
pub fn finite_diff_compare(
    net: &DpbnNetwork,
    x_batch: &Matrix,
    eps: f64,
    cfg: &TrainConfig,
    analytic: &[f64],
) -> Result<f64> {
    let base = net.params();
    check_len(base.len(), analytic.len())?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + eps;
        probe.set_params(&p)?;
        let (lp, _) = batch_loss(&probe, x_batch, cfg)?;
        p[i] = base[i] - eps;
        probe.set_params(&p)?;
        let (lm, _) = batch_loss(&probe, x_batch, cfg)?;
        p[i] = base[i];
        let mut fd = (lp - lm) / (2.0 * eps);
        if cfg.weight_decay > 0.0 && net.weight_mask()[i] {
            fd += cfg.weight_decay * base[i];
        }
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRADCHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
