//! Trainable compound activations.
//!
//! ```text
//! f(x) = Σₖ e^{a_k} f_k(e^{w_k} x + b_k) / Σₖ e^{a_k}
//! ```
//!
//! `f_1` is the base activation and fixes the output range; every other
//! component is the truncated-exponential sigmoid, bounded in (0, 1). All
//! components are strictly increasing and enter with positive weight and
//! scale, so `f` is strictly increasing and can be inverted.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::maxent::MaxEntKind;
use crate::roots::invert_increasing;

/// Initial log-weight of the sigmoid components.
pub const NEUTRAL_LOG_WEIGHT: f64 = -6.0;

/// Half-width of the interval the sigmoid biases are spread over at init.
pub const NEUTRAL_BIAS_SPREAD: f64 = 2.0;

/// One compound activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tca {
    base: MaxEntKind,
    a: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    // derived: normalized weights e^{a_k}/Σe^{a} and scales e^{w_k}
    weights: Vec<f64>,
    scales: Vec<f64>,
}

/// Partial derivatives of `f(x)` with respect to its parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct TcaPartials {
    pub da: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub dx: f64,
}

impl Tca {
    pub fn new(base: MaxEntKind, a: Vec<f64>, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::InvalidConfig("a TCA needs at least one component"));
        }
        check_len(a.len(), w.len())?;
        check_len(a.len(), b.len())?;
        let k = a.len();
        let mut t = Self { base, a, w, b, weights: vec![0.0; k], scales: vec![0.0; k] };
        t.refresh();
        Ok(t)
    }

    /// Near-identity to the base activation: sigmoid components get weight
    /// `e^{-6}` relative to the base and biases evenly spread over [−2, 2].
    pub fn neutral(base: MaxEntKind, components: usize) -> Self {
        let k = components.max(1);
        let mut a = vec![NEUTRAL_LOG_WEIGHT; k];
        a[0] = 0.0;
        let mut b = vec![0.0; k];
        if k > 2 {
            let span = 2.0 * NEUTRAL_BIAS_SPREAD / (k - 2) as f64;
            for (j, bj) in b.iter_mut().skip(1).enumerate() {
                *bj = -NEUTRAL_BIAS_SPREAD + span * j as f64;
            }
        }
        Self::new(base, a, vec![0.0; k], b).expect("consistent lengths")
    }

    #[inline]
    pub fn base(&self) -> MaxEntKind {
        self.base
    }

    /// Number of components K.
    #[inline]
    pub fn components(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Mutate the raw parameters; derived quantities are refreshed afterwards.
    pub fn update<F: FnOnce(&mut [f64], &mut [f64], &mut [f64])>(&mut self, f: F) {
        f(&mut self.a, &mut self.w, &mut self.b);
        self.refresh();
    }

    fn refresh(&mut self) {
        let amax = self.a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (p, &ak) in self.weights.iter_mut().zip(&self.a) {
            *p = libm::exp(ak - amax);
            total += *p;
        }
        self.weights.iter_mut().for_each(|p| *p /= total);
        for (s, &wk) in self.scales.iter_mut().zip(&self.w) {
            *s = libm::exp(wk);
        }
    }

    #[inline]
    fn component(&self, k: usize) -> MaxEntKind {
        if k == 0 {
            self.base
        } else {
            MaxEntKind::TruncExpon
        }
    }

    /// f(x).
    pub fn eval(&self, x: f64) -> f64 {
        let mut f = 0.0;
        for k in 0..self.components() {
            f += self.weights[k] * self.component(k).lambda(self.scales[k] * x + self.b[k]);
        }
        f
    }

    /// f′(x) > 0.
    pub fn deriv(&self, x: f64) -> f64 {
        self.eval_and_deriv(x).1
    }

    pub fn eval_and_deriv(&self, x: f64) -> (f64, f64) {
        let (mut f, mut d) = (0.0, 0.0);
        for k in 0..self.components() {
            let (v, dv) = self.component(k).lambda_and_deriv(self.scales[k] * x + self.b[k]);
            f += self.weights[k] * v;
            d += self.weights[k] * self.scales[k] * dv;
        }
        (f, d)
    }

    /// x with f(x) = y; `y` must lie strictly inside the base range.
    pub fn invert(&self, y: f64) -> Result<f64> {
        if !self.base.contains(y) {
            return Err(Error::OutOfRange { value: y });
        }
        if self.components() == 1 {
            // f(x) = f₁(e^{w}x + b): closed form through the base inverse
            let t = self.base.lambda_inverse(y)?;
            return Ok((t - self.b[0]) / self.scales[0]);
        }
        invert_increasing(|x| self.eval_and_deriv(x), y)
    }

    /// All partials of f at `x`.
    pub fn param_grads(&self, x: f64) -> TcaPartials {
        let k = self.components();
        let mut p = TcaPartials { da: vec![0.0; k], dw: vec![0.0; k], db: vec![0.0; k], dx: 0.0 };
        p.dx = self.accumulate_param_grads(x, 1.0, &mut p.da, &mut p.dw, &mut p.db);
        p
    }

    /// Add `scale · ∂f/∂(a, w, b)` at `x` into the given slices and return f′(x).
    pub fn accumulate_param_grads(
        &self,
        x: f64,
        scale: f64,
        da: &mut [f64],
        dw: &mut [f64],
        db: &mut [f64],
    ) -> f64 {
        let k = self.components();
        let mut vals = [0.0f64; 8];
        let mut heap;
        let vals: &mut [f64] = if k <= vals.len() {
            &mut vals[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        let mut f = 0.0;
        let mut fx = 0.0;
        for j in 0..k {
            let (v, dv) = self.component(j).lambda_and_deriv(self.scales[j] * x + self.b[j]);
            vals[j] = v;
            f += self.weights[j] * v;
            let pd = self.weights[j] * dv;
            db[j] += scale * pd;
            dw[j] += scale * pd * self.scales[j] * x;
            fx += pd * self.scales[j];
        }
        for j in 0..k {
            da[j] += scale * self.weights[j] * (vals[j] - f);
        }
        fx
    }
}

/// The element-wise TCAs in front of one layer: one per coordinate, or a
/// single set of parameters shared by every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct TcaLayer {
    dim: usize,
    shared: bool,
    units: Vec<Tca>,
}

impl TcaLayer {
    pub fn neutral(base: MaxEntKind, components: usize, dim: usize, shared: bool) -> Self {
        let n = if shared { 1 } else { dim };
        Self { dim, shared, units: vec![Tca::neutral(base, components); n] }
    }

    /// Build from explicit units; `units.len()` must be 1 when shared, `dim` otherwise.
    pub fn from_units(dim: usize, shared: bool, units: Vec<Tca>) -> Result<Self> {
        check_len(if shared { 1 } else { dim }, units.len())?;
        let base = units[0].base();
        let k = units[0].components();
        if units.iter().any(|u| u.base() != base || u.components() != k) {
            return Err(Error::InvalidConfig("TCA units of one layer must share base and K"));
        }
        Ok(Self { dim, shared, units })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn shared(&self) -> bool {
        self.shared
    }

    #[inline]
    pub fn base(&self) -> MaxEntKind {
        self.units[0].base()
    }

    #[inline]
    pub fn components(&self) -> usize {
        self.units[0].components()
    }

    /// The TCA acting on coordinate `i`.
    #[inline]
    pub fn unit(&self, i: usize) -> &Tca {
        if self.shared {
            &self.units[0]
        } else {
            &self.units[i]
        }
    }

    /// Index into `units()` of the parameters used by coordinate `i`.
    #[inline]
    pub fn unit_index(&self, i: usize) -> usize {
        if self.shared {
            0
        } else {
            i
        }
    }

    pub fn units(&self) -> &[Tca] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [Tca] {
        &mut self.units
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.units.len() * 3 * self.components()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| self.unit(i).eval(v)).collect()
    }

    pub fn invert(&self, y: &[f64]) -> Result<Vec<f64>> {
        y.iter().enumerate().map(|(i, &v)| self.unit(i).invert(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use MaxEntKind::*;

    fn zeros(base: MaxEntKind, k: usize) -> Tca {
        Tca::new(base, vec![0.0; k], vec![0.0; k], vec![0.0; k]).unwrap()
    }

    #[test]
    fn single_linear_is_identity() {
        let t = zeros(Linear, 1);
        assert_eq!(t.eval(1.7), 1.7);
        assert_eq!(t.deriv(-3.0), 1.0);
        assert_eq!(t.invert(-4.4).unwrap(), -4.4);
    }

    #[test]
    fn two_component_linear() {
        let t = zeros(Linear, 2);
        assert_relative_eq!(t.eval(0.0), 0.25, max_relative = 1e-15);
        assert_relative_eq!(t.deriv(0.0), (1.0 + 1.0 / 12.0) / 2.0, max_relative = 1e-15);
        let x = t.invert(0.25).unwrap();
        assert!(x.abs() < 1e-12);
        assert!((t.eval(x) - 0.25).abs() < 1e-14);
    }

    #[test]
    fn neutral_init_layout() {
        let t = Tca::neutral(TruncGauss, 3);
        assert_eq!(t.a(), &[0.0, -6.0, -6.0]);
        assert_eq!(t.w(), &[0.0; 3]);
        assert_eq!(t.b(), &[0.0, -2.0, 2.0]);
        // f(0) = (λ_TG(0) + e^{-6}(λ_TED(-2) + λ_TED(2))) / (1 + 2e^{-6})
        let e6 = (-6.0f64).exp();
        let expect = (TruncGauss.lambda(0.0) + e6 * (TruncExpon.lambda(-2.0) + TruncExpon.lambda(2.0)))
            / (1.0 + 2.0 * e6);
        assert_relative_eq!(t.eval(0.0), expect, max_relative = 1e-14);
        assert!((t.eval(0.0) - 0.797_884_560_8).abs() < 5e-3);
        assert_eq!(Tca::neutral(Linear, 1).eval(3.25), 3.25);
        assert_eq!(Tca::neutral(Linear, 2).b(), &[0.0, 0.0]);
    }

    #[test]
    fn neutral_is_close_to_base() {
        let bound = 2.0 * (-6.0f64).exp();
        // holds for K ≤ 3, the sizes used in practice
        for base in MaxEntKind::ALL {
            for k in 1..=3 {
                let t = Tca::neutral(base, k);
                for i in -300..=300 {
                    let x = i as f64 * 0.1;
                    let f1 = base.lambda(x);
                    assert!((t.eval(x) - f1).abs() <= bound * (1.0 + f1.abs()), "{base:?} K={k} x={x}");
                    assert!(t.deriv(x) > 0.0);
                }
            }
        }
    }

    #[test]
    fn single_component_weight_gradient_vanishes() {
        let t = Tca::new(TruncGauss, vec![0.7], vec![0.2], vec![-0.4]).unwrap();
        let p = t.param_grads(1.3);
        assert_eq!(p.da[0], 0.0);
        assert_relative_eq!(p.dx, t.deriv(1.3), max_relative = 1e-15);
    }

    #[test]
    fn sigmoid_bias_gradient_at_center() {
        // component 2 sees e^{w}x + b = 0
        let t = Tca::new(Linear, vec![0.3, -0.5], vec![0.1, 0.4], vec![0.2, -0.4 * 0.4f64.exp()]).unwrap();
        let x = 0.4;
        let p = t.param_grads(x);
        let total = 0.3f64.exp() + (-0.5f64).exp();
        assert_relative_eq!(p.db[1], (-0.5f64).exp() / (12.0 * total), max_relative = 1e-12);
    }

    #[test]
    fn invert_rejects_out_of_range() {
        let t = Tca::neutral(TruncGauss, 3);
        assert!(matches!(t.invert(-0.1), Err(Error::OutOfRange { .. })));
        let t = Tca::neutral(TruncExpon, 2);
        assert!(matches!(t.invert(1.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn pathological_parameters_fail_to_bracket() {
        // scales of e^{-40} make f nearly flat: the target sits beyond |x| = 1e9
        let t = Tca::new(Linear, vec![0.0, 0.0], vec![-40.0, -40.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(t.invert(5.0), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn shared_layer_uses_one_unit() {
        let l = TcaLayer::neutral(TruncGauss, 3, 5, true);
        assert_eq!(l.units().len(), 1);
        assert_eq!(l.unit_index(4), 0);
        assert_eq!(l.param_count(), 9);
        let l = TcaLayer::neutral(TruncGauss, 3, 5, false);
        assert_eq!(l.param_count(), 45);
    }

    prop_compose! {
        fn any_tca()(base in prop_oneof![Just(Linear), Just(TruncGauss), Just(TruncExpon)],
                     k in 1usize..=4)
                    (a in proptest::collection::vec(-2.0f64..2.0, k),
                     w in proptest::collection::vec(-1.0f64..1.0, k),
                     b in proptest::collection::vec(-2.0f64..2.0, k),
                     base in Just(base)) -> Tca {
            Tca::new(base, a, w, b).unwrap()
        }
    }

    proptest! {
        #[test]
        fn deriv_matches_finite_difference(t in any_tca(), x in -8.0f64..8.0) {
            // λ_TG loses a couple of digits to cancellation just above the
            // tail branch, so the step is kept coarse
            let eps = 1e-5;
            let fd = (t.eval(x + eps) - t.eval(x - eps)) / (2.0 * eps);
            let d = t.deriv(x);
            prop_assert!(d > 0.0);
            prop_assert!((d - fd).abs() <= 1e-6 * d.abs().max(1e-2), "{} vs {}", d, fd);
        }

        #[test]
        fn param_grads_match_finite_difference(t in any_tca(), x in -5.0f64..5.0) {
            let eps = 1e-6;
            let p = t.param_grads(x);
            let k = t.components();
            for j in 0..k {
                for which in 0..3 {
                    let bump = |s: f64| {
                        let mut u = t.clone();
                        u.update(|a, w, b| match which {
                            0 => a[j] += s,
                            1 => w[j] += s,
                            _ => b[j] += s,
                        });
                        u.eval(x)
                    };
                    let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    let an = [p.da[j], p.dw[j], p.db[j]][which];
                    prop_assert!((an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3),
                        "param {} of {}: {} vs {}", which, j, an, fd);
                }
            }
            prop_assert!((p.dx - t.deriv(x)).abs() <= 1e-15 * p.dx.abs().max(1.0));
        }

        #[test]
        fn inversion_round_trip(t in any_tca(), x in -20.0f64..20.0) {
            let y = t.eval(x);
            prop_assume!(t.base().contains(y));
            let back = t.invert(y).unwrap();
            prop_assert!((back - x).abs() <= 1e-9, "{} -> {} -> {}", x, y, back);
            prop_assert!((t.eval(back) - y).abs() <= 1e-12 * y.abs().max(1.0));
        }

        #[test]
        fn range_confinement(t in any_tca(), x in -30.0f64..30.0) {
            let y = t.eval(x);
            match t.base() {
                TruncGauss => prop_assert!(y > 0.0),
                TruncExpon => prop_assert!(y > 0.0 && y < 1.0),
                Linear => prop_assert!(y.is_finite()),
            }
            prop_assert!(t.deriv(x) > 0.0);
        }
    }
}
