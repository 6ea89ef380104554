//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! Networks are tiny (tens to a few hundred units), so a plain
//! layer-by-layer backward pass is all that is needed. Every model in
//! [`crate::models`] is built from [`Mlp`] plus a little glue.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Visitor over named parameter tensors, in a fixed order.
///
/// Gradients are stored in a value of the same type as the parameters, so
/// zipping parameters and gradients is a matter of visiting both.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, data| data.iter_mut().for_each(|v| *v = value));
    }

    /// Rounds every parameter to the nearest `f32`, so that 32-bit
    /// checkpoints reload bit-exactly.
    fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, data| data.iter_mut().for_each(|v| *v = *v as f32 as f64));
    }

    fn flatten(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, data| out.push(data.to_vec()));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Affine layer `y = x W + b`; `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let scale = (1.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Multi-layer perceptron with SiLU hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Intermediate values kept by [`Mlp::forward_traced`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [in, hidden..., out]`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    /// Layer widths, `[in, hidden..., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.ncols()));
        sizes
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.raw_dim()),
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = h.dot(&layer.weight);
            pre += &layer.bias;
            if i < last {
                pre.mapv_inplace(silu);
            }
            h = pre;
        }
        h
    }

    pub fn forward_traced(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpTrace) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = h.dot(&layer.weight);
            pre += &layer.bias;
            inputs.push(h);
            if i < last {
                h = pre.mapv(silu);
                pre_acts.push(pre);
            } else {
                h = pre;
            }
        }
        (
            h,
            MlpTrace {
                inputs,
                pre: pre_acts,
            },
        )
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the output), accumulating
    /// parameter gradients into `grads` when given. Returns the gradient
    /// w.r.t. the input.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        grad_out: ArrayView2<f64>,
        mut grads: Option<&mut Mlp>,
    ) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(grads) = grads.as_deref_mut() {
                let acc = &mut grads.layers[l];
                acc.weight += &trace.inputs[l].t().dot(&g);
                acc.bias += &g.sum_axis(Axis(0));
            }
            let mut gh = g.dot(&layer.weight.t());
            if l > 0 {
                ndarray::Zip::from(&mut gh)
                    .and(&trace.pre[l - 1])
                    .for_each(|g, &p| *g *= silu_grad(p));
            }
            g = gh;
        }
        g
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            f(
                &format!("layers.{i}.weight"),
                l.weight.shape(),
                l.weight.as_slice().expect("standard layout"),
            );
            f(
                &format!("layers.{i}.bias"),
                l.bias.shape(),
                l.bias.as_slice().expect("standard layout"),
            );
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(
                &format!("layers.{i}.weight"),
                l.weight.as_slice_mut().expect("standard layout"),
            );
            f(
                &format!("layers.{i}.bias"),
                l.bias.as_slice_mut().expect("standard layout"),
            );
        }
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.flatten();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            let (g, m, v) = (&grads[idx], &mut m[idx], &mut v[idx]);
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise log-sum-exp.
pub fn logsumexp_rows(logits: ArrayView2<f64>) -> Array1<f64> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sinusoidal features of an integer step, `dim` must be even.
pub fn timestep_features(t: usize, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}
