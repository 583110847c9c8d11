use std::collections::BTreeMap;

use super::{Element, Param, ParamKind};

/// Parameter update rule. The trainer calls [`Optimizer::begin_step`] once
/// per step and then [`Optimizer::update`] for every parameter.
pub trait Optimizer<F: Element>: Send {
    fn name(&self) -> &str;
    fn begin_step(&mut self);
    fn update(&mut self, name: &str, param: &mut Param<F>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction; weight decay is added to the gradient (L2).
pub struct Adam<F> {
    cfg: AdamConfig,
    step: i32,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Element> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }
}

impl<F: Element> Optimizer<F> for Adam<F> {
    fn name(&self) -> &str {
        "adam"
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, name: &str, param: &mut Param<F>) {
        if param.kind == ParamKind::Buffer {
            return;
        }
        let c = self.cfg;
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![F::zero(); param.len()], vec![F::zero(); param.len()]));
        let b1 = F::from_f64_lossy(c.beta1);
        let b2 = F::from_f64_lossy(c.beta2);
        let one = F::one();
        let wd = F::from_f64_lossy(c.weight_decay);
        let bc1 = F::from_f64_lossy(1.0 - c.beta1.powi(self.step));
        let bc2 = F::from_f64_lossy(1.0 - c.beta2.powi(self.step));
        let lr = F::from_f64_lossy(c.lr);
        let eps = F::from_f64_lossy(c.eps);
        for i in 0..param.value.len() {
            let g = param.grad[i] + wd * param.value[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param.value[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Plain SGD with optional momentum.
pub struct Sgd<F> {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<F>>,
}

impl<F: Element> Sgd<F> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }
}

impl<F: Element> Optimizer<F> for Sgd<F> {
    fn name(&self) -> &str {
        "sgd"
    }

    fn begin_step(&mut self) {}

    fn update(&mut self, name: &str, param: &mut Param<F>) {
        if param.kind == ParamKind::Buffer {
            return;
        }
        let lr = F::from_f64_lossy(self.lr);
        let mu = F::from_f64_lossy(self.momentum);
        let vel = self.velocity.entry(name.to_string()).or_insert_with(|| vec![F::zero(); param.len()]);
        for i in 0..param.value.len() {
            vel[i] = mu * vel[i] + param.grad[i];
            param.value[i] -= lr * vel[i];
        }
    }
}
