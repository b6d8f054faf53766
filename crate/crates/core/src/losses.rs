//! Edge attention loss, masked orientation loss and the SGD optimizer.

use crate::error::{Error, Result};
use crate::network::{NetworkParams, ParamKind};
use crate::occlusion::{wrap_angle, EdgeMap, OrientationMap};
use crate::tensor::{CustomBackward, Graph, Real, Shape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the orientation term.
    pub lambda: f64,
    /// Images per minibatch.
    pub mini_batch: usize,
    /// Weight of edge pixels; non-edge pixels get `1 - alpha`.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Smooth-L1 transition point.
    pub smooth_l1_beta: f64,
    /// Probability clamp for the logarithms.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mini_batch: 5,
            alpha: 0.75,
            gamma: 2.0,
            smooth_l1_beta: 1.0,
            eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.mini_batch == 0 {
            return Err(Error::Config("mini_batch must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config("eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Per-pixel focal loss and its derivative with respect to `p`.
///
/// The derivative is evaluated at the clamped probability but is not zeroed
/// outside the clamp, so saturated wrong predictions keep a learning signal.
pub fn focal_term(p: f64, edge: bool, alpha: f64, gamma: f64, eps: f64) -> (f64, f64) {
    let p = p.clamp(eps, 1.0 - eps);
    if edge {
        let q = 1.0 - p;
        let w = q.powf(gamma);
        let loss = -alpha * w * p.ln();
        let dw = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
        (loss, -alpha * (dw * p.ln() + w / p))
    } else {
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * (1.0 - p).ln();
        let dw = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        (loss, -(1.0 - alpha) * (dw * (1.0 - p).ln() - w / (1.0 - p)))
    }
}

/// Smooth-L1 and its derivative.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!("{op}: prediction shape {a} differs from target shape {b}")));
    }
    Ok(())
}

struct FocalRule {
    gt: Vec<bool>,
    alpha: f64,
    gamma: f64,
    eps: f64,
}

impl<T: Real> CustomBackward<T> for FocalRule {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let g = grad_out.item().as_f64();
        let d = p
            .data()
            .iter()
            .zip(&self.gt)
            .map(|(&v, &e)| T::from_f64_lossy(g * focal_term(v.as_f64(), e, self.alpha, self.gamma, self.eps).1))
            .collect();
        vec![Some(Tensor::from_vec(p.shape(), d).expect("same shape"))]
    }
}

/// Summed focal loss of `edge_prob` against a binary target of the same shape.
pub fn attention_loss<T: Real>(g: &mut Graph<T>, edge_prob: Var, gt: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    check_same("attention_loss", g.shape(edge_prob), gt.shape())?;
    let mut labels = Vec::with_capacity(gt.len());
    for &v in gt.data() {
        if v == T::one() {
            labels.push(true);
        } else if v == T::zero() {
            labels.push(false);
        } else {
            return Err(Error::Invalid(format!("attention_loss: target value {v} is not binary")));
        }
    }
    let total: f64 = g
        .value(edge_prob)
        .data()
        .iter()
        .zip(&labels)
        .map(|(&p, &e)| focal_term(p.as_f64(), e, cfg.alpha, cfg.gamma, cfg.eps).0)
        .sum();
    let rule = FocalRule {
        gt: labels,
        alpha: cfg.alpha,
        gamma: cfg.gamma,
        eps: cfg.eps,
    };
    Ok(g.custom(&[edge_prob], Tensor::scalar(T::from_f64_lossy(total)), Box::new(rule)))
}

struct OrientationRule {
    target: Vec<f64>,
    mask: Vec<bool>,
    beta: f64,
}

impl<T: Real> CustomBackward<T> for OrientationRule {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let pred = inputs[0];
        let g = grad_out.item().as_f64();
        let d = pred
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if !self.mask[i] {
                    return T::zero();
                }
                let x = wrap_angle(v.as_f64() - self.target[i]);
                T::from_f64_lossy(g * smooth_l1(x, self.beta).1)
            })
            .collect();
        vec![Some(Tensor::from_vec(pred.shape(), d).expect("same shape"))]
    }
}

/// Smooth-L1 of the wrapped angular error, summed over pixels where `edges` is 1.
pub fn orientation_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    edges: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    check_same("orientation_loss", g.shape(pred), target.shape())?;
    check_same("orientation_loss", g.shape(pred), edges.shape())?;
    let target: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let mask: Vec<bool> = edges.data().iter().map(|&v| v != T::zero()).collect();
    let total: f64 = g
        .value(pred)
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, _)| mask[i])
        .map(|(i, &v)| smooth_l1(wrap_angle(v.as_f64() - target[i]), cfg.smooth_l1_beta).0)
        .sum();
    let rule = OrientationRule {
        target,
        mask,
        beta: cfg.smooth_l1_beta,
    };
    Ok(g.custom(&[pred], Tensor::scalar(T::from_f64_lossy(total)), Box::new(rule)))
}

/// Ground truth for a minibatch, stacked as `N x 1 x H x W` tensors.
#[derive(Clone, Debug)]
pub struct Targets<T: Real = f32> {
    pub edges: Tensor<T>,
    pub orientation: Tensor<T>,
}

impl<T: Real> Targets<T> {
    pub fn from_maps(maps: &[(&EdgeMap, &OrientationMap)]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let edges: Vec<Tensor<T>> = maps.iter().map(|(e, _)| e.to_tensor().cast()).collect();
        let orient: Vec<Tensor<T>> = maps.iter().map(|(_, a)| a.to_tensor().cast()).collect();
        Ok(Self {
            edges: Tensor::stack(&edges)?,
            orientation: Tensor::stack(&orient)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.edges.shape().n
    }
}

/// The loss node and the two summed terms, kept for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub al_sum: Var,
    pub sl_sum: Var,
}

/// Scalar form of the combination used by [`total_loss`].
pub fn weighted_total(al_sum: f64, sl_sum: f64, lambda: f64, batch: usize) -> f64 {
    (al_sum + lambda * sl_sum) / batch as f64
}

/// `(sum AL + lambda * sum SL) / M`, with `M` the batch size of the predictions.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    edge_prob: Var,
    orientation: Var,
    targets: &Targets<T>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let m = g.shape(edge_prob).n;
    if m == 0 {
        return Err(Error::Invalid("total_loss: empty batch".into()));
    }
    let al_sum = attention_loss(g, edge_prob, &targets.edges, cfg)?;
    let sl_sum = orientation_loss(g, orientation, &targets.orientation, &targets.edges, cfg)?;
    let weighted = g.scale(sl_sum, T::from_f64_lossy(cfg.lambda));
    let sum = g.add(al_sum, weighted)?;
    let total = g.scale(sum, T::from_f64_lossy(1.0 / m as f64));
    Ok(LossTerms { total, al_sum, sl_sum })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Minibatches accumulated per parameter update.
    pub iter_size: usize,
    /// Divide the learning rate by 10 every `lr_step` iterations (0 disables).
    pub lr_step: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-5,
            momentum: 0.9,
            weight_decay: 2e-4,
            iter_size: 3,
            lr_step: 0,
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match iteration.checked_div(self.lr_step) {
            None => self.base_lr,
            Some(steps) => self.base_lr * 0.1f64.powi(steps as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.iter_size == 0 {
            return Err(Error::Config("iter_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One momentum step on a single tensor:
/// `v = momentum * v + g`, `p -= lr * v + lr * weight_decay * p`.
pub fn sgd_update<T: Real>(p: &mut [T], v: &mut [T], g: &[T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + g;
        *p = *p - lr * *v - lr * wd * *p;
    }
}

/// Momentum SGD with gradient accumulation over `iter_size` calls.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub cfg: SgdConfig,
    velocity: Vec<Tensor<T>>,
    accum: Vec<Tensor<T>>,
    pending: usize,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig, params: &NetworkParams<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            cfg,
            velocity: zeros(),
            accum: zeros(),
            pending: 0,
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Gradients summed since the last update.
    pub fn accumulated(&self) -> &[Tensor<T>] {
        &self.accum
    }

    /// Minibatches accumulated since the last update.
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Restores the full optimizer state, e.g. when resuming.
    pub fn restore(&mut self, velocity: Vec<Tensor<T>>, accum: Vec<Tensor<T>>, pending: usize) -> Result<()> {
        let fits = |b: &[Tensor<T>]| b.len() == self.velocity.len() && b.iter().zip(&self.velocity).all(|(a, v)| a.shape() == v.shape());
        if !fits(&velocity) || !fits(&accum) {
            return Err(Error::Invalid("optimizer buffers do not match the parameter layout".into()));
        }
        if pending >= self.cfg.iter_size {
            return Err(Error::Invalid(format!("{pending} pending minibatches with iter_size {}", self.cfg.iter_size)));
        }
        self.velocity = velocity;
        self.accum = accum;
        self.pending = pending;
        Ok(())
    }

    /// Adds one minibatch gradient; every `iter_size`-th call applies the mean
    /// of the accumulated gradients. Returns whether parameters changed.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &[Tensor<T>], lr: f64) -> Result<bool> {
        if grads.len() != self.accum.len() {
            return Err(Error::Invalid(format!(
                "expected {} gradients, got {}",
                self.accum.len(),
                grads.len()
            )));
        }
        for (info, g) in params.layout().params().iter().zip(grads) {
            if g.shape() != info.shape {
                return Err(Error::Invalid(format!("gradient for {} has shape {}", info.name, g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at iteration {}",
                    info.name, params.iteration
                )));
            }
        }
        for (acc, g) in self.accum.iter_mut().zip(grads) {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + v;
            }
        }
        self.pending += 1;
        if self.pending < self.cfg.iter_size {
            return Ok(false);
        }
        let inv = T::from_f64_lossy(1.0 / self.pending as f64);
        let kinds: Vec<ParamKind> = params.layout().params().iter().map(|p| p.kind).collect();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let mean: Vec<T> = self.accum[i].data().iter().map(|&a| a * inv).collect();
            let wd = if kinds[i].decays() { self.cfg.weight_decay } else { 0.0 };
            sgd_update(p.data_mut(), self.velocity[i].data_mut(), &mean, lr, self.cfg.momentum, wd);
            self.accum[i].data_mut().iter_mut().for_each(|a| *a = T::zero());
        }
        self.pending = 0;
        Ok(true)
    }
}
