//! First-order optimizers and the moving-average parameter copy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

/// Hyperparameters. `beta1` is the heavy-ball momentum for SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && match self.kind {
                OptimizerKind::Sgd => true,
                OptimizerKind::Adam => (0.0..1.0).contains(&self.beta2) && self.eps > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer hyperparameters with per-scalar moment buffers laid out like
/// [`ParamSet::slices`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<P: ParamSet>(config: OptimizerConfig, params: &P) -> Self {
        let zeros = || params.slices().iter().map(|s| vec![0.0; s.len()]).collect::<Vec<_>>();
        let v = match config.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            config,
            m: zeros(),
            v,
            step: 0,
        }
    }

    fn check<P: ParamSet>(&self, params: &P, grads: &P) -> Result<()> {
        let p = params.slices();
        let g = grads.slices();
        let congruent = p.len() == g.len()
            && p.len() == self.m.len()
            && p.iter().zip(&g).zip(&self.m).all(|((a, b), c)| a.len() == b.len() && a.len() == c.len());
        if !congruent {
            return Err(Error::Shape("parameters, gradients and optimizer moments differ in shape".into()));
        }
        if let Some(i) = g.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient array {}", grads.names()[i])));
        }
        Ok(())
    }

    /// One update with the configured rule. Nothing is modified on error.
    pub fn apply<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self),
            OptimizerKind::Adam => adam_step(params, grads, self),
        }
    }
}

/// `m ← β₁m + g`, `w ← w − lr·m`; plain gradient descent when `β₁ = 0`.
pub fn sgd_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut OptimizerState) -> Result<()> {
    state.check(params, grads)?;
    let OptimizerConfig { lr, beta1, .. } = state.config;
    for ((w, g), m) in params.slices_mut().into_iter().zip(grads.slices()).zip(&mut state.m) {
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + g[i];
            w[i] -= lr * m[i];
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut OptimizerState) -> Result<()> {
    state.check(params, grads)?;
    if state.v.len() != state.m.len() {
        return Err(Error::Shape("adam second moments missing".into()));
    }
    let OptimizerConfig {
        lr, beta1, beta2, eps, ..
    } = state.config;
    state.step += 1;
    let k = state.step as f64;
    let c1 = 1.0 - libm::pow(beta1, k);
    let c2 = 1.0 - libm::pow(beta2, k);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for ((w, g), (m, v)) in params.slices_mut().into_iter().zip(grads.slices()).zip(moments) {
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps);
        }
    }
    Ok(())
}

/// Exponential moving average of parameter iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams<P> {
    pub decay: f64,
    pub shadow: P,
}

impl<P: ParamSet + Clone> EmaParams<P> {
    pub fn new(decay: f64, init: &P) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) && decay != 1.0 {
            return Err(Error::Config(format!("moving-average decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            shadow: init.clone(),
        })
    }

    /// `shadow ← ρ·shadow + (1−ρ)·params`, elementwise.
    pub fn update(&mut self, params: &P) {
        let rho = self.decay;
        for (s, p) in self.shadow.slices_mut().into_iter().zip(params.slices()) {
            for (a, b) in s.iter_mut().zip(p) {
                *a = rho * *a + (1.0 - rho) * b;
            }
        }
    }
}

pub fn ema_update<P: ParamSet + Clone>(ema: &mut EmaParams<P>, params: &P) {
    ema.update(params);
}
