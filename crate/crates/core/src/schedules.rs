//! Forward-process noise schedules, per-timestep KL weights and the
//! conditioning-strength ramp.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` the most noisy one.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ScheduleKind::Linear),
            "cosine" => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

/// Parameters from which a [`NoiseSchedule`] is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    /// Linear schedule whose endpoints are the usual `(1e-4, 0.02)` at
    /// `T = 1000`, rescaled by `1000 / T` so the total noise injected stays
    /// comparable for shorter chains. Both ends are capped at 0.5 so very
    /// short chains keep every `α_t` well away from zero.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        Self {
            kind: ScheduleKind::Linear,
            steps,
            beta_min: (1e-4 * scale).min(0.5),
            beta_max: (0.02 * scale).min(0.5),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::scaled_linear(100)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                const OFFSET: f64 = 0.008;
                let f = |t: f64| {
                    let c = libm::cos((t / steps as f64 + OFFSET) / (1.0 + OFFSET)
                        * core::f64::consts::FRAC_PI_2);
                    c * c
                };
                (1..=steps)
                    .map(|t| {
                        let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                        b.clamp(beta_min, beta_max)
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..steps)
            .map(|i| {
                if i == 0 {
                    betas[0]
                } else {
                    betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])
                }
            })
            .collect();
        Ok(Self {
            config: ScheduleConfig {
                kind,
                steps,
                beta_min,
                beta_max,
            },
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `ᾱ_{t-1}`, with `ᾱ_0 = 1`.
    #[inline]
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Forward-posterior variance `β̃_t` (equal to `β_1` at `t = 1`).
    #[inline]
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Uniform,
    ExpDecay,
    LinearRamp,
}

impl WeightKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Uniform => "uniform",
            WeightKind::ExpDecay => "exp-decay",
            WeightKind::LinearRamp => "linear-ramp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(WeightKind::Uniform),
            "exp-decay" => Some(WeightKind::ExpDecay),
            "linear-ramp" => Some(WeightKind::LinearRamp),
            _ => None,
        }
    }
}

/// Shape of the per-timestep KL weights `α_t`.
///
/// Both non-uniform shapes put the largest weight on `t = 1`. Setting
/// `reverse` mirrors them so the largest weight sits on `t = T` instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KLWeightConfig {
    pub kind: WeightKind,
    pub gamma: f64,
    pub normalize: bool,
    pub reverse: bool,
}

impl KLWeightConfig {
    pub const UNIFORM: KLWeightConfig = KLWeightConfig {
        kind: WeightKind::Uniform,
        gamma: 0.0,
        normalize: true,
        reverse: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "weight gamma must be a finite non-negative number, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    fn raw(&self, t: usize, steps: usize) -> f64 {
        let t = if self.reverse { steps + 1 - t } else { t };
        let frac = if steps > 1 {
            (t - 1) as f64 / (steps - 1) as f64
        } else {
            0.0
        };
        match self.kind {
            WeightKind::Uniform => 1.0,
            WeightKind::ExpDecay => libm::exp(-self.gamma * frac),
            WeightKind::LinearRamp => 1.0 + self.gamma * (1.0 - frac),
        }
    }

    /// All `T` weights at once; index `t - 1` holds `α_t`.
    pub fn weights(&self, steps: usize) -> Vec<f64> {
        let raw: Vec<f64> = (1..=steps).map(|t| self.raw(t, steps)).collect();
        if !self.normalize {
            return raw;
        }
        let sum: f64 = raw.iter().sum();
        let c = steps as f64 / sum;
        raw.into_iter().map(|w| c * w).collect()
    }
}

impl Default for KLWeightConfig {
    fn default() -> Self {
        Self {
            kind: WeightKind::ExpDecay,
            gamma: 1.0,
            normalize: true,
            reverse: false,
        }
    }
}

/// Weight `α_t` for a single timestep. Prefer [`KLWeightConfig::weights`]
/// inside loops; this recomputes the normalizer on every call.
pub fn kl_weight(cfg: &KLWeightConfig, t: usize, steps: usize) -> f64 {
    assert!(t >= 1 && t <= steps, "timestep {t} outside 1..={steps}");
    if !cfg.normalize {
        return cfg.raw(t, steps);
    }
    cfg.weights(steps)[t - 1]
}

/// Linear ramp of the cross-attention gate over training epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceRamp {
    pub g_min: f64,
    pub g_max: f64,
    pub ramp_epochs: usize,
}

impl GuidanceRamp {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.g_min)
            && (0.0..=1.0).contains(&self.g_max)
            && self.g_min <= self.g_max;
        if !ok {
            return Err(Error::Config(format!(
                "guidance ramp needs 0 <= g_min <= g_max <= 1, got ({}, {})",
                self.g_min, self.g_max
            )));
        }
        Ok(())
    }

    pub fn constant(g: f64) -> Self {
        Self {
            g_min: g,
            g_max: g,
            ramp_epochs: 0,
        }
    }
}

impl Default for GuidanceRamp {
    fn default() -> Self {
        Self {
            g_min: 0.1,
            g_max: 1.0,
            ramp_epochs: 10,
        }
    }
}

pub fn guidance_gate(ramp: &GuidanceRamp, epoch: usize) -> f64 {
    if ramp.ramp_epochs == 0 || epoch >= ramp.ramp_epochs {
        return ramp.g_max;
    }
    let frac = epoch as f64 / ramp.ramp_epochs as f64;
    ramp.g_min + (ramp.g_max - ramp.g_min) * frac
}
