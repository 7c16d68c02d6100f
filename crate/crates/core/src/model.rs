//! Differentiable loss models with exact per-sample gradients.
//!
//! Parameter layouts (`p` = input dimension, `K` = classes, `H` = hidden units):
//!
//! | kind                   | dimension `d`        | layout                              |
//! |------------------------|----------------------|-------------------------------------|
//! | `linear-mse`           | `p`                  | `w`                                 |
//! | `multinomial-logistic` | `K·p`                | `W` (K×p, row-major)                |
//! | `mlp`                  | `H·p + H + K·H + K`  | `W1` (H×p), `b1`, `W2` (K×H), `b2`  |
//!
//! `linear-mse` regresses the integer label as a real target with a scalar
//! output. The MLP uses a tanh hidden layer and a softmax cross-entropy head.
//! Every loss carries `l2/2 · ||params||²`; per-sample gradients include the
//! full `l2 · params` term so that their mean equals the full-batch gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng;

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    LinearMse,
    MultinomialLogistic,
    Mlp { hidden_dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossModel {
    kind: ModelKind,
    input_dim: usize,
    num_classes: usize,
    l2: f64,
}

impl LossModel {
    pub fn new(kind: ModelKind, input_dim: usize, num_classes: usize, l2: f64) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Config("input_dim and num_classes must be positive".into()));
        }
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!("l2 coefficient must be finite and >= 0, got {l2}")));
        }
        if let ModelKind::Mlp { hidden_dim: 0 } = kind {
            return Err(Error::Config("mlp hidden_dim must be positive".into()));
        }
        Ok(LossModel { kind, input_dim, num_classes, l2 })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn param_dim(&self) -> usize {
        let (p, k) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::LinearMse => p,
            ModelKind::MultinomialLogistic => k * p,
            ModelKind::Mlp { hidden_dim: h } => h * p + h + k * h + k,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ModelKind::LinearMse)
    }

    /// Zeros for the convex models; small seeded weights for the MLP so the
    /// hidden units are not symmetric.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut params = ParamVector::zeros(self.param_dim());
        if let ModelKind::Mlp { hidden_dim: h } = self.kind {
            let p = self.input_dim;
            let k = self.num_classes;
            let mut rng = rng::keyed_rng(&[seed, rng::TAG_INIT]);
            let s1 = 1.0 / (p as f64).sqrt();
            let s2 = 1.0 / (h as f64).sqrt();
            for v in &mut params[..h * p] {
                *v = rng.random_range(-s1..s1);
            }
            let w2 = h * p + h;
            for v in &mut params[w2..w2 + k * h] {
                *v = rng.random_range(-s2..s2);
            }
        }
        params
    }

    fn check(&self, params: &ParamVector, data: &Dataset) -> Result<()> {
        if params.len() != self.param_dim() {
            return Err(Error::DimensionMismatch { expected: self.param_dim(), got: params.len() });
        }
        if data.dim() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: data.dim() });
        }
        if data.num_classes() > self.num_classes && self.is_classifier() {
            return Err(Error::Config(format!(
                "dataset has {} classes but model has {}",
                data.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Mean per-sample loss plus `l2/2 · ||params||²`.
    pub fn loss(&self, params: &ParamVector, data: &Dataset) -> Result<f64> {
        self.check(params, data)?;
        let mut scratch = Scratch::new(self);
        let mut total = 0.0;
        for (x, y) in data.rows() {
            total += self.sample_eval(params, x, y, &mut scratch, None);
        }
        Ok(total / data.len() as f64 + 0.5 * self.l2 * params.norm_sq())
    }

    /// Exact full-batch gradient.
    pub fn grad(&self, params: &ParamVector, data: &Dataset) -> Result<ParamVector> {
        self.check(params, data)?;
        let mut scratch = Scratch::new(self);
        let mut out = ParamVector::zeros(self.param_dim());
        for (x, y) in data.rows() {
            self.sample_eval(params, x, y, &mut scratch, Some(&mut out));
        }
        out.scale(1.0 / data.len() as f64);
        if self.l2 != 0.0 {
            out.axpy(self.l2, params);
        }
        Ok(out)
    }

    /// Gradient of the `j`-th component function (sample loss plus the l2 term).
    pub fn grad_component(&self, params: &ParamVector, data: &Dataset, j: usize) -> Result<ParamVector> {
        self.check(params, data)?;
        if j >= data.len() {
            return Err(Error::IndexOutOfRange { index: j, len: data.len() });
        }
        let mut scratch = Scratch::new(self);
        let mut out = ParamVector::zeros(self.param_dim());
        self.sample_eval(params, data.row(j), data.label(j), &mut scratch, Some(&mut out));
        if self.l2 != 0.0 {
            out.axpy(self.l2, params);
        }
        Ok(out)
    }

    /// Predicted class; ties go to the smallest class id.
    pub fn predict(&self, params: &ParamVector, x: &[f64]) -> Result<usize> {
        self.predict_within(params, x, None)
    }

    fn predict_within(&self, params: &ParamVector, x: &[f64], classes: Option<&[usize]>) -> Result<usize> {
        if !self.is_classifier() {
            return Err(Error::Unsupported("accuracy requires a classification model".into()));
        }
        let mut scratch = Scratch::new(self);
        self.logits(params, x, &mut scratch);
        let candidates: Box<dyn Iterator<Item = usize>> = match classes {
            Some(c) => Box::new(c.iter().copied()),
            None => Box::new(0..self.num_classes),
        };
        let mut best: Option<(usize, f64)> = None;
        for k in candidates {
            let z = scratch.logits[k];
            let better = match best {
                None => true,
                Some((bk, bz)) => z > bz || (z == bz && k < bk),
            };
            if better {
                best = Some((k, z));
            }
        }
        best.map(|(k, _)| k).ok_or_else(|| Error::Config("empty class subset".into()))
    }

    /// Fraction of rows whose argmax prediction matches the label.
    pub fn accuracy(&self, params: &ParamVector, data: &Dataset) -> Result<f64> {
        self.accuracy_impl(params, data, None)
    }

    /// Accuracy with the argmax restricted to `classes` (a per-task head).
    pub fn accuracy_within(&self, params: &ParamVector, data: &Dataset, classes: &[usize]) -> Result<f64> {
        self.accuracy_impl(params, data, Some(classes))
    }

    fn accuracy_impl(&self, params: &ParamVector, data: &Dataset, classes: Option<&[usize]>) -> Result<f64> {
        self.check(params, data)?;
        if !self.is_classifier() {
            return Err(Error::Unsupported("accuracy requires a classification model".into()));
        }
        let mut correct = 0usize;
        for (x, y) in data.rows() {
            if self.predict_within(params, x, classes)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Smoothness constant of the full-batch loss.
    ///
    /// `linear-mse`: `λ_max(XᵀX)/n + l2`; `multinomial-logistic`: the upper
    /// bound `½·λ_max(XᵀX)/n + l2`. The MLP has no closed form and must be
    /// configured by the caller.
    pub fn estimate_smoothness(&self, data: &Dataset) -> Result<f64> {
        let scale = match self.kind {
            ModelKind::LinearMse => 1.0,
            ModelKind::MultinomialLogistic => 0.5,
            ModelKind::Mlp { .. } => {
                return Err(Error::Unsupported("no smoothness estimate for mlp; configure L".into()))
            }
        };
        let lambda = gram_top_eigenvalue(data)?;
        Ok(scale * lambda / data.len() as f64 + self.l2)
    }

    /// Largest smoothness constant over the individual component functions
    /// (`max_j ||x_j||²` scaled as above). It also bounds every mean of
    /// components, so it is a valid `L` for all restrictions of the data.
    pub fn component_smoothness(&self, data: &Dataset) -> Result<f64> {
        let scale = match self.kind {
            ModelKind::LinearMse => 1.0,
            ModelKind::MultinomialLogistic => 0.5,
            ModelKind::Mlp { .. } => {
                return Err(Error::Unsupported("no smoothness estimate for mlp; configure L".into()))
            }
        };
        let max_sq = data.rows().map(|(x, _)| x.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        Ok(scale * max_sq + self.l2)
    }

    fn logits(&self, params: &ParamVector, x: &[f64], s: &mut Scratch) {
        let p = self.input_dim;
        match self.kind {
            ModelKind::LinearMse => {
                s.logits[0] = dot(&params[..p], x);
            }
            ModelKind::MultinomialLogistic => {
                for k in 0..self.num_classes {
                    s.logits[k] = dot(&params[k * p..(k + 1) * p], x);
                }
            }
            ModelKind::Mlp { hidden_dim: h } => {
                let k_cls = self.num_classes;
                let b1 = h * p;
                let w2 = b1 + h;
                let b2 = w2 + k_cls * h;
                for u in 0..h {
                    s.hidden[u] = (dot(&params[u * p..(u + 1) * p], x) + params[b1 + u]).tanh();
                }
                for k in 0..k_cls {
                    s.logits[k] = dot(&params[w2 + k * h..w2 + (k + 1) * h], &s.hidden) + params[b2 + k];
                }
            }
        }
    }

    /// Loss of one sample (without the l2 term). When `grad` is given the
    /// sample gradient is added into it.
    fn sample_eval(
        &self,
        params: &ParamVector,
        x: &[f64],
        y: usize,
        s: &mut Scratch,
        grad: Option<&mut ParamVector>,
    ) -> f64 {
        self.logits(params, x, s);
        let p = self.input_dim;
        match self.kind {
            ModelKind::LinearMse => {
                let r = s.logits[0] - y as f64;
                if let Some(g) = grad {
                    for (gv, xv) in g[..p].iter_mut().zip(x) {
                        *gv += r * xv;
                    }
                }
                0.5 * r * r
            }
            ModelKind::MultinomialLogistic => {
                let loss = softmax_xent(&mut s.logits, y);
                if let Some(g) = grad {
                    for k in 0..self.num_classes {
                        let coef = s.logits[k] - if k == y { 1.0 } else { 0.0 };
                        if coef != 0.0 {
                            for (gv, xv) in g[k * p..(k + 1) * p].iter_mut().zip(x) {
                                *gv += coef * xv;
                            }
                        }
                    }
                }
                loss
            }
            ModelKind::Mlp { hidden_dim: h } => {
                let k_cls = self.num_classes;
                let loss = softmax_xent(&mut s.logits, y);
                if let Some(g) = grad {
                    let b1 = h * p;
                    let w2 = b1 + h;
                    let b2 = w2 + k_cls * h;
                    for v in s.dhidden.iter_mut() {
                        *v = 0.0;
                    }
                    for k in 0..k_cls {
                        let dz = s.logits[k] - if k == y { 1.0 } else { 0.0 };
                        g[b2 + k] += dz;
                        for u in 0..h {
                            g[w2 + k * h + u] += dz * s.hidden[u];
                            s.dhidden[u] += dz * params[w2 + k * h + u];
                        }
                    }
                    for u in 0..h {
                        let da = s.dhidden[u] * (1.0 - s.hidden[u] * s.hidden[u]);
                        g[b1 + u] += da;
                        for (gv, xv) in g[u * p..(u + 1) * p].iter_mut().zip(x) {
                            *gv += da * xv;
                        }
                    }
                }
                loss
            }
        }
    }
}

struct Scratch {
    logits: Vec<f64>,
    hidden: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    fn new(model: &LossModel) -> Self {
        let h = match model.kind {
            ModelKind::Mlp { hidden_dim } => hidden_dim,
            _ => 0,
        };
        Scratch { logits: vec![0.0; model.num_classes.max(1)], hidden: vec![0.0; h], dhidden: vec![0.0; h] }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Replaces `logits` by softmax probabilities and returns `-log p_y`.
fn softmax_xent(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_y = logits[y] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    sum.ln() - shifted_y
}

/// Largest eigenvalue of `XᵀX` by power iteration.
fn gram_top_eigenvalue(data: &Dataset) -> Result<f64> {
    let p = data.dim();
    let mut gram = vec![0.0; p * p];
    for (x, _) in data.rows() {
        for a in 0..p {
            if x[a] == 0.0 {
                continue;
            }
            for b in 0..p {
                gram[a * p + b] += x[a] * x[b];
            }
        }
    }
    let mut v: Vec<f64> = (0..p).map(|i| 1.0 + (i as f64 + 1.0) / (2.0 * p as f64 + 1.0)).collect();
    normalize(&mut v);
    let mut w = vec![0.0; p];
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        for a in 0..p {
            w[a] = dot(&gram[a * p..(a + 1) * p], &v);
        }
        let next = dot(&v, &w);
        let norm = w.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if (next - lambda).abs() <= POWER_TOL * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    Err(Error::NoConvergence(POWER_MAX_ITERS))
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|t| t * t).sum::<f64>().sqrt();
    for t in v {
        *t /= n;
    }
}
