//! Standard feed-forward auto-encoder with truncated-Gaussian activations,
//! trained by ordinary backpropagation.
//!
//! ```text
//! encoder:  e_{i+1} = λ(W_i' e_i + b_i)            e_0 = x, y = e_L
//! decoder:  d_i = V_i d_{i+1} + c_i, then λ        d_L = y, x̂ = d_0 (no λ)
//! ```
//!
//! `V_i` is `in_dim × out_dim`, the same shape as `W_i`. In tied mode
//! `V_i = s_i W_i` with one trainable scalar per layer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::linalg::Matrix;
use crate::maxent::MaxEntKind;

const ACT: MaxEntKind = MaxEntKind::TruncGauss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderMode {
    /// Scaled transposes of the encoder weights.
    Tied,
    /// Independent weights.
    #[default]
    Untied,
}

#[derive(Debug, Clone, PartialEq)]
enum Decoder {
    Tied { scales: Vec<f64> },
    Untied { weights: Vec<Matrix> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AecNetwork {
    enc_w: Vec<Matrix>,
    enc_b: Vec<Vec<f64>>,
    decoder: Decoder,
    dec_c: Vec<Vec<f64>>,
}

/// Gradients shaped like [`AecNetwork::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct AecGradients {
    pub flat: Vec<f64>,
}

/// Running sums over part of a batch; see
/// [`BatchAccumulator`](crate::training::BatchAccumulator).
#[derive(Debug, Clone, PartialEq)]
pub struct AecAccumulator {
    pub grads: Vec<f64>,
    pub sq_error: f64,
    pub count: usize,
}

impl AecAccumulator {
    pub fn new(net: &AecNetwork) -> Self {
        Self { grads: vec![0.0; net.param_count()], sq_error: 0.0, count: 0 }
    }

    pub fn push(&mut self, sq_error: f64, g: &AecGradients) {
        self.sq_error += sq_error;
        self.grads.iter_mut().zip(&g.flat).for_each(|(t, v)| *t += v);
        self.count += 1;
    }

    pub fn merge(&mut self, other: &AecAccumulator) {
        self.sq_error += other.sq_error;
        self.grads.iter_mut().zip(&other.grads).for_each(|(t, v)| *t += v);
        self.count += other.count;
    }

    /// `(loss, gradient)` of the per-coordinate MSE plus weight decay.
    pub fn finish(mut self, net: &AecNetwork, weight_decay: f64) -> (f64, AecGradients) {
        let denom = (self.count.max(1) * net.input_dim()) as f64;
        self.grads.iter_mut().for_each(|t| *t /= denom);
        if weight_decay > 0.0 {
            let p = net.params();
            for ((t, m), v) in self.grads.iter_mut().zip(net.weight_mask()).zip(p) {
                if m {
                    *t += weight_decay * v;
                }
            }
        }
        let loss = if self.count > 0 { self.sq_error / denom } else { 0.0 };
        (loss, AecGradients { flat: self.grads })
    }
}

/// Pre-activations and activations kept by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AecCache {
    /// `e_0 … e_L`.
    pub enc: Vec<Vec<f64>>,
    /// Encoder pre-activations, per layer.
    pub enc_pre: Vec<Vec<f64>>,
    /// Decoder pre-activations, per layer (index `i` feeds `d_i`).
    pub dec_pre: Vec<Vec<f64>>,
    /// `d_0 … d_L`; `d_0` is the reconstruction.
    pub dec: Vec<Vec<f64>>,
}

impl AecNetwork {
    /// Random weights with variance `1/in_dim`, zero biases, unit tied scales.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], mode: DecoderMode, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig("auto-encoder needs at least two positive dims"));
        }
        let mut gauss = |n: usize, m: usize| {
            let s = 1.0 / libm::sqrt(n as f64);
            let data = (0..n * m)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    g * s
                })
                .collect();
            Matrix::from_vec(n, m, data)
        };
        let layers = dims.len() - 1;
        let mut enc_w = Vec::with_capacity(layers);
        for i in 0..layers {
            enc_w.push(gauss(dims[i], dims[i + 1])?);
        }
        let decoder = match mode {
            DecoderMode::Tied => Decoder::Tied { scales: vec![1.0; layers] },
            DecoderMode::Untied => {
                let mut weights = Vec::with_capacity(layers);
                for i in 0..layers {
                    weights.push(gauss(dims[i], dims[i + 1])?);
                }
                Decoder::Untied { weights }
            }
        };
        Ok(Self {
            enc_b: (0..layers).map(|i| vec![0.0; dims[i + 1]]).collect(),
            dec_c: (0..layers).map(|i| vec![0.0; dims[i]]).collect(),
            enc_w,
            decoder,
        })
    }

    /// Network with every parameter zero (tied scales one).
    pub fn zeros(dims: &[usize], mode: DecoderMode) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig("auto-encoder needs at least two positive dims"));
        }
        let layers = dims.len() - 1;
        let zero_w = || (0..layers).map(|i| Matrix::zeros(dims[i], dims[i + 1])).collect::<Vec<_>>();
        let decoder = match mode {
            DecoderMode::Tied => Decoder::Tied { scales: vec![1.0; layers] },
            DecoderMode::Untied => Decoder::Untied { weights: zero_w() },
        };
        Ok(Self {
            enc_w: zero_w(),
            enc_b: (0..layers).map(|i| vec![0.0; dims[i + 1]]).collect(),
            decoder,
            dec_c: (0..layers).map(|i| vec![0.0; dims[i]]).collect(),
        })
    }

    pub fn mode(&self) -> DecoderMode {
        match self.decoder {
            Decoder::Tied { .. } => DecoderMode::Tied,
            Decoder::Untied { .. } => DecoderMode::Untied,
        }
    }

    pub fn layers(&self) -> usize {
        self.enc_w.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.enc_w.iter().map(Matrix::rows).collect();
        d.push(self.enc_w[self.layers() - 1].cols());
        d
    }

    pub fn input_dim(&self) -> usize {
        self.enc_w[0].rows()
    }

    pub fn encoder_weights(&self) -> &[Matrix] {
        &self.enc_w
    }

    /// Effective decoder matrix of layer `i`.
    pub fn decoder_weights(&self, i: usize) -> Matrix {
        match &self.decoder {
            Decoder::Tied { scales } => {
                let mut m = self.enc_w[i].clone();
                m.scale(scales[i]);
                m
            }
            Decoder::Untied { weights } => weights[i].clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for (i, w) in self.enc_w.iter().enumerate() {
            n += w.rows() * w.cols() + w.cols() + w.rows();
            n += match &self.decoder {
                Decoder::Tied { .. } => 1,
                Decoder::Untied { weights } => weights[i].rows() * weights[i].cols(),
            };
        }
        n
    }

    /// Flat parameters: per layer `W_i` row-major and `b_i`; then per layer
    /// the decoder weights (`V_i` row-major, or `s_i`) and `c_i`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.enc_w.iter().zip(&self.enc_b) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        for i in 0..self.layers() {
            match &self.decoder {
                Decoder::Tied { scales } => out.push(scales[i]),
                Decoder::Untied { weights } => out.extend_from_slice(weights[i].as_slice()),
            }
            out.extend_from_slice(&self.dec_c[i]);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.param_count(), p.len())?;
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[off..off + dst.len()]);
            off += dst.len();
        };
        for (w, b) in self.enc_w.iter_mut().zip(&mut self.enc_b) {
            take(w.as_mut_slice());
            take(b);
        }
        for i in 0..self.enc_w.len() {
            match &mut self.decoder {
                Decoder::Tied { scales } => take(&mut scales[i..i + 1]),
                Decoder::Untied { weights } => take(weights[i].as_mut_slice()),
            }
            take(&mut self.dec_c[i]);
        }
        Ok(())
    }

    /// `true` for entries of [`params`](Self::params) subject to weight decay
    /// (weight matrices; not biases or tied scales).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in &self.enc_w {
            out.extend(core::iter::repeat_n(true, w.rows() * w.cols()));
            out.extend(core::iter::repeat_n(false, w.cols()));
        }
        for w in &self.enc_w {
            match &self.decoder {
                Decoder::Tied { .. } => out.push(false),
                Decoder::Untied { .. } => out.extend(core::iter::repeat_n(true, w.rows() * w.cols())),
            }
            out.extend(core::iter::repeat_n(false, w.rows()));
        }
        out
    }

    /// Bottleneck code.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.enc.pop().expect("at least one layer"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<AecCache> {
        check_len(self.input_dim(), x.len())?;
        let l = self.layers();
        let mut enc = Vec::with_capacity(l + 1);
        let mut enc_pre = Vec::with_capacity(l);
        enc.push(x.to_vec());
        for i in 0..l {
            let mut a = self.enc_w[i].mul_t_vec(&enc[i]);
            a.iter_mut().zip(&self.enc_b[i]).for_each(|(v, b)| *v += b);
            enc.push(a.iter().map(|&v| ACT.lambda(v)).collect());
            enc_pre.push(a);
        }
        let mut dec = vec![Vec::new(); l + 1];
        let mut dec_pre = vec![Vec::new(); l];
        dec[l] = enc[l].clone();
        for i in (0..l).rev() {
            let v = self.decoder_weights(i);
            let mut a = v.mul_vec(&dec[i + 1]);
            a.iter_mut().zip(&self.dec_c[i]).for_each(|(v, c)| *v += c);
            dec[i] = if i == 0 { a.clone() } else { a.iter().map(|&v| ACT.lambda(v)).collect() };
            dec_pre[i] = a;
        }
        Ok(AecCache { enc, enc_pre, dec_pre, dec })
    }

    pub fn autoencode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.dec.swap_remove(0))
    }

    /// `(Σ (x̂ − x)², ∂/∂params)` for one sample.
    pub fn sample_gradient(&self, x: &[f64]) -> Result<(f64, AecGradients)> {
        let cache = self.forward(x)?;
        let l = self.layers();
        let sq: f64 = cache.dec[0].iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();

        let mut g_enc_w: Vec<Matrix> = self.enc_w.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let mut g_enc_b: Vec<Vec<f64>> = self.enc_b.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut g_dec_v: Vec<Matrix> = self.enc_w.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let mut g_dec_c: Vec<Vec<f64>> = self.dec_c.iter().map(|c| vec![0.0; c.len()]).collect();

        // cotangent on the decoder pre-activation of layer 0 (linear output)
        let mut g_pre: Vec<f64> = cache.dec[0].iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
        for i in 0..l {
            // dec_pre[i] = V_i d_{i+1} + c_i
            g_dec_c[i].iter_mut().zip(&g_pre).for_each(|(c, g)| *c += g);
            g_dec_v[i].add_outer(1.0, &g_pre, &cache.dec[i + 1]);
            let g_d = self.decoder_weights(i).mul_t_vec(&g_pre);
            if i + 1 < l {
                g_pre = g_d
                    .iter()
                    .zip(&cache.dec_pre[i + 1])
                    .map(|(g, a)| g * ACT.lambda_deriv(*a))
                    .collect();
            } else {
                g_pre = g_d;
            }
        }
        // g_pre is now the cotangent on y = e_L
        let mut g_e = g_pre;
        for i in (0..l).rev() {
            let g_a: Vec<f64> = g_e
                .iter()
                .zip(&cache.enc_pre[i])
                .map(|(g, a)| g * ACT.lambda_deriv(*a))
                .collect();
            g_enc_b[i].iter_mut().zip(&g_a).for_each(|(b, g)| *b += g);
            g_enc_w[i].add_outer(1.0, &cache.enc[i], &g_a);
            g_e = self.enc_w[i].mul_vec(&g_a);
        }

        let mut flat = Vec::with_capacity(self.param_count());
        match &self.decoder {
            Decoder::Tied { scales } => {
                // V_i = s_i W_i: ∂W_i gains s_i ∂V_i, ∂s_i = ⟨W_i, ∂V_i⟩
                for i in 0..l {
                    let gv = g_dec_v[i].as_slice();
                    g_enc_w[i].as_mut_slice().iter_mut().zip(gv).for_each(|(w, v)| *w += scales[i] * v);
                }
                for i in 0..l {
                    flat.extend_from_slice(g_enc_w[i].as_slice());
                    flat.extend_from_slice(&g_enc_b[i]);
                }
                for i in 0..l {
                    flat.push(crate::linalg::dot(self.enc_w[i].as_slice(), g_dec_v[i].as_slice()));
                    flat.extend_from_slice(&g_dec_c[i]);
                }
            }
            Decoder::Untied { .. } => {
                for i in 0..l {
                    flat.extend_from_slice(g_enc_w[i].as_slice());
                    flat.extend_from_slice(&g_enc_b[i]);
                }
                for i in 0..l {
                    flat.extend_from_slice(g_dec_v[i].as_slice());
                    flat.extend_from_slice(&g_dec_c[i]);
                }
            }
        }
        Ok((sq, AecGradients { flat }))
    }

    /// Batch MSE (per coordinate) and its gradient, plus `wd·W` on weight
    /// matrices. Samples are reduced in row order.
    pub fn batch_gradient(&self, batch: &Matrix, weight_decay: f64) -> Result<(f64, AecGradients)> {
        check_len(self.input_dim(), batch.cols())?;
        let samples = (0..batch.rows())
            .map(|r| self.sample_gradient(batch.row(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.reduce(samples, weight_decay))
    }

    /// Ordered reduction of per-sample results into the batch MSE gradient.
    pub fn reduce<I>(&self, samples: I, weight_decay: f64) -> (f64, AecGradients)
    where
        I: IntoIterator<Item = (f64, AecGradients)>,
    {
        let mut acc = AecAccumulator::new(self);
        for (s, g) in samples {
            acc.push(s, &g);
        }
        acc.finish(self, weight_decay)
    }

    pub fn batch_loss(&self, batch: &Matrix) -> Result<f64> {
        check_len(self.input_dim(), batch.cols())?;
        if batch.rows() == 0 {
            return Ok(0.0);
        }
        let mut sq = 0.0;
        for r in 0..batch.rows() {
            let x = batch.row(r);
            sq += self.autoencode(x)?.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(sq / (batch.rows() * batch.cols()) as f64)
    }

    /// Worst relative discrepancy between backprop and central differences.
    pub fn finite_diff_check(&self, batch: &Matrix, eps: f64) -> Result<f64> {
        let (_, g) = self.batch_gradient(batch, 0.0)?;
        let base = self.params();
        let mut probe = self.clone();
        let mut p = base.clone();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            p[i] = base[i] + eps;
            probe.set_params(&p)?;
            let lp = probe.batch_loss(batch)?;
            p[i] = base[i] - eps;
            probe.set_params(&p)?;
            let lm = probe.batch_loss(batch)?;
            p[i] = base[i];
            let fd = (lp - lm) / (2.0 * eps);
            let a = g.flat[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(crate::training::GRADCHECK_FLOOR));
        }
        Ok(worst)
    }
}
