//! The D-PBN auto-encoder.
//!
//! Layer `i` applies element-wise TCAs to its input and then a
//! dimension-reducing linear map:
//!
//! ```text
//! u_i = TCA_i(z_i)          (z_0 = x)
//! z_{i+1} = W_i' u_i        (y = z_L, no TCA after the last map)
//! ```
//!
//! Decoding walks the stack backwards. For each layer it solves the saddle
//! point of `W_i` against the current target with the MaxEnt kind of
//! `TCA_i`'s base range, takes the conditional mean `û_i`, and inverts
//! `TCA_i` to get the target of the layer below (or the reconstruction).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::linalg::Matrix;
use crate::maxent::MaxEntKind;
use crate::saddle::{SaddleError, SaddleResult, SaddleSolver, SolverOptions};
use crate::tca::TcaLayer;

/// One layer: the TCAs on its input followed by `z ↦ W' u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in_dim × out_dim`.
    pub weights: Matrix,
    pub tca: TcaLayer,
}

impl Layer {
    pub fn new(weights: Matrix, tca: TcaLayer) -> Result<Self> {
        check_len(weights.rows(), tca.dim())?;
        if weights.cols() > weights.rows() || weights.cols() == 0 {
            return Err(Error::InvalidConfig("layer must not increase dimension"));
        }
        Ok(Self { weights, tca })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    /// MaxEnt kind of this layer's input range, used by its saddle solve.
    #[inline]
    pub fn kind(&self) -> MaxEntKind {
        self.tca.base()
    }
}

/// Shape of a network to be initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// `[input, hidden…, bottleneck]`, strictly decreasing.
    pub dims: Vec<usize>,
    /// TCA component count in front of each layer.
    pub components: Vec<usize>,
    /// Base activation in front of each layer.
    pub bases: Vec<MaxEntKind>,
    /// One TCA per layer instead of one per coordinate.
    pub shared_tca: bool,
}

impl NetworkSpec {
    /// Linear base on the input, truncated-Gaussian base on hidden layers.
    pub fn new(dims: &[usize], components: &[usize]) -> Self {
        let layers = dims.len().saturating_sub(1);
        let bases = (0..layers)
            .map(|i| if i == 0 { MaxEntKind::Linear } else { MaxEntKind::TruncGauss })
            .collect();
        Self { dims: dims.to_vec(), components: components.to_vec(), bases, shared_tca: false }
    }

    pub fn layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::InvalidConfig("a network needs at least two dims"));
        }
        check_len(self.layers(), self.components.len())?;
        check_len(self.layers(), self.bases.len())?;
        if self.dims.windows(2).any(|p| p[1] >= p[0] || p[1] == 0) {
            return Err(Error::InvalidConfig("dims must be strictly decreasing and positive"));
        }
        if self.components.contains(&0) {
            return Err(Error::InvalidConfig("TCA component count must be at least 1"));
        }
        Ok(())
    }
}

/// Values cached by [`DpbnNetwork::encode`] for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeTrace {
    /// Input of each layer's TCA: `z_0 = x, z_1, …, z_{L-1}`.
    pub tca_in: Vec<Vec<f64>>,
    /// Output of each layer's TCA: `u_0, …, u_{L-1}`.
    pub tca_out: Vec<Vec<f64>>,
    /// Bottleneck `y = z_L`.
    pub y: Vec<f64>,
}

/// One layer of the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeLayer {
    /// Target `z` handed to the saddle solve.
    pub target: Vec<f64>,
    /// Saddle solution; `solve.x_hat` estimates this layer's TCA output.
    pub solve: SaddleResult,
    /// TCA inverse of `solve.x_hat`: the next target, or the reconstruction.
    pub inverted: Vec<f64>,
    /// The saddle solve converged and every inversion succeeded.
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub x_hat: Vec<f64>,
    /// Every layer succeeded.
    pub success: bool,
    /// Per layer, in forward order.
    pub layers: Vec<DecodeLayer>,
}

impl DecodeOutput {
    pub fn layer_converged(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.ok).collect()
    }
}

/// Solvers for every layer, built once per parameter setting.
pub struct DecodePlan<'a> {
    solvers: Vec<SaddleSolver<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpbnNetwork {
    layers: Vec<Layer>,
}

impl DpbnNetwork {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_len(pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers })
    }

    /// Random orthonormal-column weights and neutral TCAs. Layers on a
    /// bounded-below range get columns orthogonal to the ones vector, so
    /// their rows sum to zero and positively span the output space: every
    /// decoder target then has a saddle point.
    pub fn random<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers());
        for i in 0..spec.layers() {
            let (n, m) = (spec.dims[i], spec.dims[i + 1]);
            let mut w = random_orthonormal(n, m, rng)?;
            if spec.bases[i] != MaxEntKind::Linear {
                w = random_balanced(n, m, rng)?;
            }
            let tca = TcaLayer::neutral(spec.bases[i], spec.components[i], n, spec.shared_tca);
            layers.push(Layer::new(w, tca)?);
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[input, …, bottleneck]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(Layer::in_dim).collect();
        d.push(self.bottleneck_dim());
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.tca.param_count())
            .sum()
    }

    /// All parameters in canonical order: per layer, `W` row-major, then each
    /// TCA unit's `a`, `w`, `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            for u in l.tca.units() {
                out.extend_from_slice(u.a());
                out.extend_from_slice(u.w());
                out.extend_from_slice(u.b());
            }
        }
        out
    }

    /// Inverse of [`params`](Self::params).
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.param_count(), p.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
            for u in l.tca.units_mut() {
                let k = u.components();
                u.update(|a, w, b| {
                    a.copy_from_slice(&p[off..off + k]);
                    w.copy_from_slice(&p[off + k..off + 2 * k]);
                    b.copy_from_slice(&p[off + 2 * k..off + 3 * k]);
                });
                off += 3 * k;
            }
        }
        Ok(())
    }

    /// `true` for entries of [`params`](Self::params) that are weights
    /// (as opposed to TCA parameters).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(core::iter::repeat_n(true, l.weights.as_slice().len()));
            out.extend(core::iter::repeat_n(false, l.tca.param_count()));
        }
        out
    }

    /// Forward pass to the bottleneck.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, EncodeTrace)> {
        check_len(self.input_dim(), x.len())?;
        let mut tca_in = Vec::with_capacity(self.layers.len());
        let mut tca_out = Vec::with_capacity(self.layers.len());
        let mut z = x.to_vec();
        for layer in &self.layers {
            let u = layer.tca.apply(&z);
            let next = layer.weights.mul_t_vec(&u);
            tca_in.push(z);
            tca_out.push(u);
            z = next;
        }
        Ok((z.clone(), EncodeTrace { tca_in, tca_out, y: z }))
    }

    pub fn plan(&self, opts: SolverOptions) -> Result<DecodePlan<'_>> {
        let solvers = self
            .layers
            .iter()
            .map(|l| SaddleSolver::new(&l.weights, l.kind(), opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodePlan { solvers })
    }

    /// Backward pass from a bottleneck value. Failed solves are reported in
    /// `success` and decoding continues from the best iterate; errors are
    /// only raised for shape mismatches or degenerate weights.
    pub fn decode(&self, y: &[f64], opts: SolverOptions) -> Result<DecodeOutput> {
        let plan = self.plan(opts)?;
        self.decode_with(&plan, y)
    }

    pub fn decode_with(&self, plan: &DecodePlan<'_>, y: &[f64]) -> Result<DecodeOutput> {
        check_len(self.bottleneck_dim(), y.len())?;
        let n_layers = self.layers.len();
        let mut out: Vec<Option<DecodeLayer>> = vec![None; n_layers];
        let mut target = y.to_vec();
        let mut success = true;
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let (solve, mut ok) = match plan.solvers[i].solve(&target) {
                Ok(r) => (r, true),
                Err(SaddleError::NotConverged { best }) => (*best, false),
                Err(SaddleError::RankDeficient(e)) => return Err(e),
            };
            let mut inverted = Vec::with_capacity(layer.in_dim());
            for (j, &v) in solve.x_hat.iter().enumerate() {
                match layer.tca.unit(j).invert(v) {
                    Ok(x) => inverted.push(x),
                    Err(_) => {
                        ok = false;
                        inverted.push(clamped_inverse(layer, j, v));
                    }
                }
            }
            success &= ok;
            let next = inverted.clone();
            out[i] = Some(DecodeLayer { target, solve, inverted, ok });
            target = next;
        }
        Ok(DecodeOutput {
            x_hat: target,
            success,
            layers: out.into_iter().map(|l| l.expect("every layer decoded")).collect(),
        })
    }

    /// Encode then decode.
    pub fn autoencode(&self, x: &[f64], opts: SolverOptions) -> Result<(Vec<f64>, bool)> {
        let plan = self.plan(opts)?;
        self.autoencode_with(&plan, x)
    }

    pub fn autoencode_with(&self, plan: &DecodePlan<'_>, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        let (y, _) = self.encode(x)?;
        let d = self.decode_with(plan, &y)?;
        Ok((d.x_hat, d.success))
    }

    /// Fraction of rows whose auto-encoding succeeds at every layer.
    pub fn sampling_efficiency(&self, batch: &Matrix, opts: SolverOptions) -> Result<f64> {
        if batch.rows() == 0 {
            return Ok(1.0);
        }
        let plan = self.plan(opts)?;
        let mut ok = 0usize;
        for r in 0..batch.rows() {
            if self.autoencode_with(&plan, batch.row(r))?.1 {
                ok += 1;
            }
        }
        Ok(ok as f64 / batch.rows() as f64)
    }
}

/// Inverse of a value the TCA rejected: pull it just inside the range and
/// retry, falling back to 0.
fn clamped_inverse(layer: &Layer, j: usize, v: f64) -> f64 {
    let unit = layer.tca.unit(j);
    let y = match unit.base() {
        MaxEntKind::Linear => v,
        MaxEntKind::TruncGauss => v.max(f64::MIN_POSITIVE),
        MaxEntKind::TruncExpon => v.clamp(f64::EPSILON, 1.0 - f64::EPSILON),
    };
    unit.invert(y).unwrap_or(0.0)
}

/// Orthonormal columns, each orthogonal to `1`. Needs `n > m`.
fn random_balanced<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Matrix> {
    if m >= n {
        return Err(Error::InvalidConfig("balanced weights need in_dim > out_dim"));
    }
    loop {
        let mut w = random_orthonormal(n, m, rng)?;
        for c in 0..m {
            let mean = (0..n).map(|r| w[(r, c)]).sum::<f64>() / n as f64;
            for r in 0..n {
                w.row_mut(r)[c] -= mean;
            }
        }
        if w.orthonormalize_columns().is_ok() {
            return Ok(w);
        }
    }
}

fn random_orthonormal<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Matrix> {
    let scale = 1.0 / libm::sqrt(n as f64);
    loop {
        let data = (0..n * m)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g * scale
            })
            .collect();
        let mut w = Matrix::from_vec(n, m, data)?;
        if w.orthonormalize_columns().is_ok() {
            return Ok(w);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tca::Tca;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_layer(w: Matrix) -> Layer {
        let n = w.rows();
        Layer::new(w, TcaLayer::neutral(MaxEntKind::Linear, 1, n, false)).unwrap()
    }

    #[test]
    fn single_layer_orthonormal_encode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_orthonormal(6, 3, &mut rng).unwrap();
        let net = DpbnNetwork::from_layers(vec![linear_layer(w.clone())]).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, 0.0, -0.7];
        let (y, _) = net.encode(&x).unwrap();
        assert_eq!(y, w.mul_t_vec(&x));
    }

    #[test]
    fn linear_cascade() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w1 = random_orthonormal(7, 4, &mut rng).unwrap();
        let w2 = random_orthonormal(4, 2, &mut rng).unwrap();
        let net = DpbnNetwork::from_layers(vec![linear_layer(w1.clone()), linear_layer(w2.clone())]).unwrap();
        let x: Vec<f64> = (0..7).map(|i| i as f64 * 0.25 - 0.8).collect();
        let (y, _) = net.encode(&x).unwrap();
        let expect = w2.mul_t_vec(&w1.mul_t_vec(&x));
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn trace_recomputes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DpbnNetwork::random(&NetworkSpec::new(&[12, 8, 5, 3], &[2, 3, 3]), &mut rng).unwrap();
        perturb_tcas(&mut net, &mut rng);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let (y, trace) = net.encode(&x).unwrap();
        assert_eq!(trace.tca_in[0], x);
        for (i, l) in net.layers().iter().enumerate() {
            assert_eq!(trace.tca_out[i], l.tca.apply(&trace.tca_in[i]));
            let z = l.weights.mul_t_vec(&trace.tca_out[i]);
            if i + 1 < net.layers().len() {
                assert_eq!(trace.tca_in[i + 1], z);
            } else {
                assert_eq!(y, z);
            }
        }
    }

    pub(crate) fn perturb_tcas(net: &mut DpbnNetwork, rng: &mut ChaCha8Rng) {
        for l in net.layers_mut() {
            for u in l.tca.units_mut() {
                u.update(|a, w, b| {
                    for v in a.iter_mut().skip(1) {
                        *v = rng.random_range(-2.0..0.0);
                    }
                    for v in w.iter_mut() {
                        *v += rng.random_range(-0.3..0.3);
                    }
                    for v in b.iter_mut() {
                        *v += rng.random_range(-0.5..0.5);
                    }
                });
            }
        }
    }

    #[test]
    fn balanced_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_balanced(9, 4, &mut rng).unwrap();
        let ones = [1.0; 9];
        assert!(w.mul_t_vec(&ones).iter().all(|v| v.abs() < 1e-13));
        let g = w.gram();
        for i in 0..4 {
            for j in 0..4 {
                assert!((g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-13);
            }
        }
        // any target is reachable, including ones far outside W'(positive)
        let net = DpbnNetwork::from_layers(vec![
            Layer::new(w, TcaLayer::neutral(MaxEntKind::TruncGauss, 1, 9, false)).unwrap()
        ])
        .unwrap();
        let d = net.decode(&[-3.0, 2.0, 5.0, -1.0], SolverOptions::default()).unwrap();
        assert!(d.success);
    }

    #[test]
    fn square_layer_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for base in MaxEntKind::ALL {
            let w = random_orthonormal(5, 5, &mut rng).unwrap();
            let net = DpbnNetwork::from_layers(vec![
                Layer::new(w, TcaLayer::neutral(base, 1, 5, false)).unwrap()
            ])
            .unwrap();
            let x = [0.4, -0.2, 1.1, -1.3, 0.05];
            let (xh, ok) = net.autoencode(&x, SolverOptions::default()).unwrap();
            assert!(ok);
            for (a, b) in xh.iter().zip(&x) {
                assert!((a - b).abs() < 1e-8, "{base:?}");
            }
            let m = Matrix::from_vec(1, 5, x.to_vec()).unwrap();
            assert_eq!(net.sampling_efficiency(&m, SolverOptions::default()).unwrap(), 1.0);
        }
    }

    #[test]
    fn deepest_layer_matches_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DpbnNetwork::random(&NetworkSpec::new(&[12, 8, 5, 3], &[2, 3, 3]), &mut rng).unwrap();
        perturb_tcas(&mut net, &mut rng);
        let opts = SolverOptions::default();
        for _ in 0..20 {
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (y, _) = net.encode(&x).unwrap();
            let d = net.decode(&y, opts).unwrap();
            let last = d.layers.last().unwrap();
            assert!(last.solve.converged);
            let back = net.layers().last().unwrap().weights.mul_t_vec(&last.solve.x_hat);
            for (a, b) in back.iter().zip(&y) {
                assert!((a - b).abs() <= opts.tol * (1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
            }
            assert!(last.solve.x_hat.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn infeasible_bottleneck_counts_as_failure() {
        // one TG layer with W = [1, 1]': any negative target is unreachable
        let w = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let net = DpbnNetwork::from_layers(vec![
            Layer::new(w, TcaLayer::neutral(MaxEntKind::TruncGauss, 3, 2, false)).unwrap()
        ])
        .unwrap();
        let d = net.decode(&[-1.0], SolverOptions::default()).unwrap();
        assert!(!d.success);
        assert_eq!(d.layer_converged(), vec![false]);
        assert_eq!(d.x_hat.len(), 2);
    }

    #[test]
    fn decode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = DpbnNetwork::random(&NetworkSpec::new(&[10, 6, 3], &[2, 3]), &mut rng).unwrap();
        perturb_tcas(&mut net, &mut rng);
        let x: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let a = net.autoencode(&x, SolverOptions::default()).unwrap();
        let b = net.autoencode(&x, SolverOptions::default()).unwrap();
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = DpbnNetwork::random(&NetworkSpec::new(&[12, 8, 5, 3], &[2, 3, 3]), &mut rng).unwrap();
        assert_eq!(net.param_count(), 96 + 40 + 15 + 12 * 6 + 8 * 9 + 5 * 9);
        let mut p = net.params();
        p.iter_mut().for_each(|v| *v += 0.01);
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert_eq!(net.weight_mask().iter().filter(|&&m| m).count(), 151);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = DpbnNetwork::random(&NetworkSpec::new(&[6, 4, 2], &[2, 3]), &mut rng).unwrap();
        assert!(matches!(net.encode(&[0.0; 5]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(net.decode(&[0.0; 3], SolverOptions::default()), Err(Error::ShapeMismatch { .. })));
        assert!(NetworkSpec::new(&[6, 6, 2], &[2, 3]).validate().is_err());
        assert!(NetworkSpec::new(&[6, 4, 2], &[2]).validate().is_err());
        let w = Matrix::zeros(3, 4);
        assert!(Layer::new(w, TcaLayer::neutral(MaxEntKind::Linear, 1, 3, false)).is_err());
        let tca = Tca::neutral(MaxEntKind::Linear, 2);
        assert!(TcaLayer::from_units(3, false, vec![tca]).is_err());
    }
}
