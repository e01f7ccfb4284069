//! Minimal dense kernel for the dynamics model: matrices, MLPs with explicit
//! reverse-mode gradients, stable softmax, Adam, and finite-difference
//! gradient verification.
//!
//! Everything trains in f64; the model graph is static per configuration so
//! adjoints are written out explicitly instead of through a tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = W x`
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *yi = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
    }

    /// `y = W^T u`
    pub fn t_matvec(&self, u: &[f64], y: &mut [f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.fill(0.0);
        for (i, ui) in u.iter().enumerate() {
            if *ui == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (yj, w) in y.iter_mut().zip(row) {
                *yj += ui * w;
            }
        }
    }

    /// `W += u x^T` (outer-product accumulation for weight gradients).
    pub fn add_outer(&mut self, u: &[f64], x: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            if *ui == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (w, xj) in row.iter_mut().zip(x) {
                *w += ui * xj;
            }
        }
    }
}

/// Hidden-layer nonlinearity. The output layer of every MLP is linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::ConfigInvalid(format!("unknown activation {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weights: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// A stack of affine layers with `activation` between them and a linear
/// output. A single layer is a plain affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

/// Pre-activations and layer inputs captured by the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl Mlp {
    /// Builds a zero-initialized MLP with the given dimension chain
    /// `[in, hidden..., out]`.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::DimMismatch("mlp needs at least one layer".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::zeros(w[1], w[0]))
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch(format!(
                "mlp input {} != expected {}",
                x.len(),
                self.in_dim()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut preacts = Vec::with_capacity(n);
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = layer.bias.clone();
            let mut wx = vec![0.0; layer.out_dim()];
            layer.weights.matvec(&cur, &mut wx);
            for (p, w) in pre.iter_mut().zip(&wx) {
                *p += w;
            }
            inputs.push(cur);
            let last = l + 1 == n;
            cur = if last {
                pre.clone()
            } else {
                pre.iter().map(|&v| self.activation.apply(v)).collect()
            };
            preacts.push(pre);
        }
        Ok((cur, MlpCache { inputs, preacts }))
    }

    /// Evaluates without building a cache.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Exact reverse-mode gradients of `forward`. Parameter gradients
    /// accumulate into `grads` (so shared MLPs applied at many sites can sum
    /// their contributions); the input gradient is returned.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        grads: &mut Mlp,
    ) -> Result<Vec<f64>> {
        if cache.inputs.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::StaleCache(
                "cache/grads layer count differs from mlp".into(),
            ));
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::StaleCache(format!(
                "upstream dim {} != out dim {}",
                upstream.len(),
                self.out_dim()
            )));
        }
        let n = self.layers.len();
        let mut delta = upstream.to_vec();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if cache.inputs[l].len() != layer.in_dim() || cache.preacts[l].len() != layer.out_dim()
            {
                return Err(Error::StaleCache(format!("layer {l} shapes disagree")));
            }
            // d(pre-activation): output layer is linear.
            if l + 1 != n {
                for (d, pre) in delta.iter_mut().zip(&cache.preacts[l]) {
                    *d *= self.activation.derivative(*pre);
                }
            }
            let g = &mut grads.layers[l];
            g.weights.add_outer(&delta, &cache.inputs[l]);
            for (b, d) in g.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            let mut dx = vec![0.0; layer.in_dim()];
            layer.weights.t_matvec(&delta, &mut dx);
            delta = dx;
        }
        Ok(delta)
    }

    /// A same-shape zero MLP, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("softmax input not finite".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Gradient of softmax given its output `y` and upstream `dy`:
/// `ds_i = y_i (dy_i - sum_j y_j dy_j)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)).collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for a fixed list of parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(block_lens: &[usize], cfg: AdamConfig) -> Self {
        Self {
            m: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update across all blocks.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam blocks: state {} params {} grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.m[b].len() || g.len() != self.m[b].len() {
                return Err(Error::ShapeMismatch(format!(
                    "adam block {b}: state {} params {} grads {}",
                    self.m[b].len(),
                    p.len(),
                    g.len()
                )));
            }
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Central-difference check of `analytic` against `loss` at the sampled
/// parameter indices. Returns the worst relative error, with the denominator
/// floored so near-zero gradients compare on an absolute scale.
pub fn grad_check<F>(
    mut loss: F,
    params: &mut [f64],
    analytic: &[f64],
    epsilon: f64,
    sample: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {} vs analytic {}",
            params.len(),
            analytic.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for &i in sample {
        let orig = params[i];
        params[i] = orig + epsilon;
        let plus = loss(params)?;
        params[i] = orig - epsilon;
        let minus = loss(params)?;
        params[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Deterministic weight init: He-style scaling for ReLU nets from a seeded
/// uniform stream.
pub fn init_mlp(mlp: &mut Mlp, rng: &mut impl rand::Rng) {
    use rand::distributions::Distribution;
    for layer in &mut mlp.layers {
        let fan_in = layer.in_dim() as f64;
        let std = (2.0 / fan_in).sqrt();
        let dist = rand::distributions::Uniform::new(-std * 1.7320508, std * 1.7320508);
        for w in layer.weights.data_mut() {
            *w = dist.sample(rng);
        }
        for b in &mut layer.bias {
            *b = 0.0;
        }
    }
}
