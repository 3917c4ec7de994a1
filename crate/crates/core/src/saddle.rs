//! Saddle-point solve for one layer of the backward pass.
//!
//! Given the linear output `z = W' x` of a layer with input range fixed by a
//! [`MaxEntKind`], the conditional mean of `x` on the manifold
//! `{x : W' x = z}` under the MaxEnt prior is `x̂ = λ(W h)` where `h` solves
//!
//! ```text
//! W' λ(W h) = z.
//! ```
//!
//! The left side is the gradient of the convex function `Σᵢ Λ((W h)ᵢ) − h'z`,
//! so its Jacobian `W' diag(λ′(W h)) W` is symmetric positive definite and
//! damped Newton iterations converge whenever a solution exists. When `z`
//! lies outside `W'` applied to the input range no solution exists; the
//! solver then reports [`SaddleError::NotConverged`] together with its best
//! iterate.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::linalg::{norm2, norm_inf, Cholesky, Matrix};
use crate::maxent::MaxEntKind;

/// Tuning knobs of the Newton solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence when `‖W'λ(Wh) − z‖∞ ≤ tol · (1 + ‖z‖∞)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Maximum number of step halvings per iteration.
    pub damping: usize,
    /// Added to the Jacobian diagonal before factoring.
    pub ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100, damping: 20, ridge: 1e-12 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("solver tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("solver max_iter must be at least 1"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidConfig("solver ridge must be non-negative"));
        }
        Ok(())
    }
}

/// Outcome of one saddle-point solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleResult {
    /// Saddle point (or best iterate when not converged).
    pub h: Vec<f64>,
    /// Conditional mean `λ(W h)`.
    pub x_hat: Vec<f64>,
    /// `‖W'λ(Wh) − z‖∞` at `h`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Factor of `W' diag(λ′(Wh)) W + ridge·I` at `h`, reused by implicit
    /// differentiation.
    pub factor: Cholesky,
}

/// Solver failures.
#[derive(Debug, Clone, PartialEq)]
pub enum SaddleError {
    /// No point met the tolerance; `best` holds the smallest-residual iterate.
    NotConverged { best: Box<SaddleResult> },
    /// The Jacobian could not be factored even with the ridge.
    RankDeficient(Error),
}

impl core::fmt::Display for SaddleError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::NotConverged { best } => write!(
                f,
                "saddle solve did not converge after {} iterations (residual {:e})",
                best.iterations, best.residual
            ),
            Self::RankDeficient(e) => write!(f, "saddle Jacobian is rank deficient: {e}"),
        }
    }
}

impl core::error::Error for SaddleError {}

impl SaddleError {
    /// Best available iterate, if the failure produced one.
    pub fn into_best(self) -> Option<SaddleResult> {
        match self {
            Self::NotConverged { best } => Some(*best),
            Self::RankDeficient(_) => None,
        }
    }
}

/// Element-wise λ applied to `W h`.
pub fn conditional_mean(w: &Matrix, h: &[f64], kind: MaxEntKind) -> Vec<f64> {
    let mut a = w.mul_vec(h);
    a.iter_mut().for_each(|v| *v = kind.lambda(*v));
    a
}

/// Newton Jacobian `W' diag(λ′(W h)) W`.
pub fn saddle_jacobian(w: &Matrix, h: &[f64], kind: MaxEntKind) -> Matrix {
    let a = w.mul_vec(h);
    let d: Vec<f64> = a.iter().map(|&v| kind.lambda_deriv(v)).collect();
    w.weighted_gram(&d)
}

/// One-shot solve; see [`SaddleSolver`] to amortize per-matrix work.
pub fn solve_saddle(
    w: &Matrix,
    z: &[f64],
    kind: MaxEntKind,
    opts: SolverOptions,
) -> core::result::Result<SaddleResult, SaddleError> {
    SaddleSolver::new(w, kind, opts).map_err(SaddleError::RankDeficient)?.solve(z)
}

/// Saddle solver bound to one weight matrix.
///
/// Building it factors the linearization at `h = 0`, which gives every solve
/// its starting point and, for the linear kind, is the exact Jacobian.
#[derive(Debug, Clone)]
pub struct SaddleSolver<'a> {
    w: &'a Matrix,
    kind: MaxEntKind,
    opts: SolverOptions,
    lam0: f64,
    init: Cholesky,
    col_sums: Vec<f64>,
}

impl<'a> SaddleSolver<'a> {
    pub fn new(w: &'a Matrix, kind: MaxEntKind, opts: SolverOptions) -> Result<Self> {
        opts.validate()?;
        let (lam0, d0) = kind.lambda_and_deriv(0.0);
        let mut j0 = w.gram();
        j0.scale(d0);
        j0.add_diagonal(opts.ridge);
        let init = Cholesky::new(&j0)?;
        let col_sums = w.mul_t_vec(&vec![1.0; w.rows()]);
        Ok(Self { w, kind, opts, lam0, init, col_sums })
    }

    pub fn kind(&self) -> MaxEntKind {
        self.kind
    }

    pub fn weights(&self) -> &Matrix {
        self.w
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    /// `h₀ = (λ′(0) W'W + ridge)⁻¹ (z − λ(0) W'1)`.
    pub fn initial_point(&self, z: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = z.iter().zip(&self.col_sums).map(|(zi, ci)| zi - self.lam0 * ci).collect();
        self.init.solve_in_place(&mut h);
        h
    }

    fn residual(&self, h: &[f64], z: &[f64], x_hat: &mut Vec<f64>, deriv: &mut Vec<f64>) -> Vec<f64> {
        let mut a = self.w.mul_vec(h);
        deriv.resize(a.len(), 0.0);
        for (ai, di) in a.iter_mut().zip(deriv.iter_mut()) {
            let (l, d) = self.kind.lambda_and_deriv(*ai);
            *ai = l;
            *di = d;
        }
        let mut f = self.w.mul_t_vec(&a);
        for (fi, zi) in f.iter_mut().zip(z) {
            *fi -= zi;
        }
        *x_hat = a;
        f
    }

    fn factor_at(&self, deriv: &[f64]) -> core::result::Result<Cholesky, SaddleError> {
        if self.kind == MaxEntKind::Linear {
            return Ok(self.init.clone());
        }
        let mut j = self.w.weighted_gram(deriv);
        j.add_diagonal(self.opts.ridge);
        Cholesky::new(&j).map_err(SaddleError::RankDeficient)
    }

    /// Solve `W' λ(W h) = z`.
    pub fn solve(&self, z: &[f64]) -> core::result::Result<SaddleResult, SaddleError> {
        check_len(self.w.cols(), z.len()).map_err(SaddleError::RankDeficient)?;
        self.solve_with_trace(z, |_, _| {})
    }

    /// Solve, reporting `(iteration, ‖F‖₂)` after every accepted point.
    pub fn solve_with_trace<T: FnMut(usize, f64)>(
        &self,
        z: &[f64],
        mut trace: T,
    ) -> core::result::Result<SaddleResult, SaddleError> {
        let target = self.opts.tol * (1.0 + norm_inf(z));
        let mut h = self.initial_point(z);
        let mut x_hat = Vec::new();
        let mut deriv = Vec::new();
        let mut f = self.residual(&h, z, &mut x_hat, &mut deriv);
        let mut f2 = norm2(&f);
        trace(0, f2);

        let mut iterations = 0;
        loop {
            let res = norm_inf(&f);
            let factor = self.factor_at(&deriv)?;
            if res <= target || !res.is_finite() || iterations == self.opts.max_iter {
                let converged = res <= target;
                if converged && self.kind == MaxEntKind::Linear {
                    // iterative refinement: the normal equations square cond(W)
                    for _ in 0..3 {
                        let mut step: Vec<f64> = f.iter().map(|v| -v).collect();
                        factor.solve_in_place(&mut step);
                        let trial: Vec<f64> = h.iter().zip(&step).map(|(hi, di)| hi + di).collect();
                        let mut trial_x = Vec::new();
                        let trial_f = self.residual(&trial, z, &mut trial_x, &mut deriv);
                        let trial_f2 = norm2(&trial_f);
                        if !(trial_f2 < 0.5 * f2) {
                            break;
                        }
                        (h, x_hat, f, f2) = (trial, trial_x, trial_f, trial_f2);
                    }
                }
                let res = norm_inf(&f);
                let out = SaddleResult { h, x_hat, residual: res, iterations, converged, factor };
                return if converged {
                    Ok(out)
                } else {
                    Err(SaddleError::NotConverged { best: Box::new(out) })
                };
            }

            let mut step: Vec<f64> = f.iter().map(|v| -v).collect();
            factor.solve_in_place(&mut step);

            let mut s = 1.0;
            let mut accepted = None;
            for _ in 0..=self.opts.damping {
                let trial: Vec<f64> = h.iter().zip(&step).map(|(hi, di)| hi + s * di).collect();
                let mut trial_x = Vec::new();
                let mut trial_d = Vec::new();
                let trial_f = self.residual(&trial, z, &mut trial_x, &mut trial_d);
                let trial_f2 = norm2(&trial_f);
                if trial_f2 < f2 {
                    accepted = Some((trial, trial_x, trial_d, trial_f, trial_f2));
                    break;
                }
                s *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some((nh, nx, nd, nf, nf2)) => {
                    h = nh;
                    x_hat = nx;
                    deriv = nd;
                    f = nf;
                    f2 = nf2;
                    trace(iterations, f2);
                }
                None => {
                    // stagnated: no damped step reduces the residual
                    let out = SaddleResult {
                        h,
                        x_hat,
                        residual: res,
                        iterations,
                        converged: false,
                        factor,
                    };
                    return Err(SaddleError::NotConverged { best: Box::new(out) });
                }
            }
        }
    }
}
