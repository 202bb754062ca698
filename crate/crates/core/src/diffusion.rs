//! Gaussian forward process, its posterior, isotropic Gaussian KL, and the
//! per-timestep assembly of the variational objective.
//!
//! The reverse variance is fixed to the posterior variance `β̃_t`, so every
//! term of the objective is a closed-form KL between two isotropic
//! Gaussians sharing a variance.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::conditioning::TextContext;
use crate::error::{Error, Result};
use crate::schedules::{KLWeightConfig, NoiseSchedule};
use crate::tensor::ImageTensor;

/// Isotropic Gaussian `N(mean, var·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: ImageTensor,
    pub var: f64,
}

/// One forward transition `x_t ~ q(x_t | x_{t-1})`, given the standard-normal draw.
pub fn q_sample_step(
    x_prev: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    sched.check_t(t)?;
    x_prev.check_shape(noise, "q_sample_step noise")?;
    let beta = sched.beta(t);
    Ok(x_prev.lincomb(libm::sqrt(1.0 - beta), noise, libm::sqrt(beta)))
}

/// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`
pub fn q_sample_closed(
    x0: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    sched.check_t(t)?;
    x0.check_shape(eps, "q_sample_closed noise")?;
    let ab = sched.alpha_bar(t);
    Ok(x0.lincomb(libm::sqrt(ab), eps, libm::sqrt(1.0 - ab)))
}

/// Coefficients `(c_0, c_t)` of the posterior mean `c_0·x_0 + c_t·x_t`.
pub fn posterior_coefficients(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar_prev(t);
    let c0 = libm::sqrt(ab_prev) * beta / (1.0 - ab);
    let ct = libm::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    (c0, ct)
}

/// Forward posterior `q(x_{t-1} | x_t, x_0)`. At `t = 1` the mean is `x_0`
/// and the variance is `β_1`.
pub fn q_posterior(
    x0: &ImageTensor,
    xt: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<GaussianParams> {
    sched.check_t(t)?;
    x0.check_shape(xt, "q_posterior")?;
    let (c0, ct) = posterior_coefficients(sched, t);
    Ok(GaussianParams {
        mean: x0.lincomb(c0, xt, ct),
        var: sched.posterior_var(t),
    })
}

/// `KL(p ‖ q)` for isotropic Gaussians of equal dimension.
pub fn gaussian_kl(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    if !(p.var > 0.0 && q.var > 0.0) {
        return Err(Error::InvalidInput(format!(
            "variances must be positive, got {} and {}",
            p.var, q.var
        )));
    }
    p.mean.check_shape(&q.mean, "gaussian_kl")?;
    let d = p.mean.len() as f64;
    let log_ratio = 0.5 * libm::log(q.var / p.var);
    let trace = d * (log_ratio + p.var / (2.0 * q.var) - 0.5);
    let maha = p.mean.sq_dist(&q.mean) / (2.0 * q.var);
    Ok((trace + maha).max(0.0))
}

/// Reverse-step Gaussian from a noise prediction:
/// mean `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, variance `β̃_t`.
pub fn mu_from_eps(
    xt: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<GaussianParams> {
    sched.check_t(t)?;
    xt.check_shape(eps_hat, "mu_from_eps")?;
    let inv_sqrt_alpha = 1.0 / libm::sqrt(sched.alpha(t));
    let eps_coef = sched.beta(t) / libm::sqrt(1.0 - sched.alpha_bar(t));
    Ok(GaussianParams {
        mean: xt.lincomb(inv_sqrt_alpha, eps_hat, -inv_sqrt_alpha * eps_coef),
        var: sched.posterior_var(t),
    })
}

/// Anything that predicts the injected noise from `(x_t, t, context)`.
pub trait EpsModel {
    fn predict_eps(&self, xt: &ImageTensor, t: usize, ctx: &TextContext) -> Result<ImageTensor>;
}

/// An [`EpsModel`] with exact reverse-mode gradients.
pub trait DifferentiableEpsModel: EpsModel {
    type Grad;

    fn zero_grad(&self) -> Self::Grad;

    /// Evaluates `ε̂`, asks `upstream` for `∂L/∂ε̂`, and accumulates
    /// `∂L/∂θ` into `grad`.
    fn eps_vjp(
        &self,
        xt: &ImageTensor,
        t: usize,
        ctx: &TextContext,
        upstream: &mut dyn FnMut(&ImageTensor) -> Result<ImageTensor>,
        grad: &mut Self::Grad,
    ) -> Result<()>;
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn predict_eps(&self, xt: &ImageTensor, t: usize, ctx: &TextContext) -> Result<ImageTensor> {
        (**self).predict_eps(xt, t, ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// One uniformly drawn timestep per example, scaled by `T`.
    Stochastic,
    /// Every timestep for every example.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub x0: ImageTensor,
    pub ctx: TextContext,
    pub draws: Vec<NoiseDraw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
    pub estimator: Estimator,
}

impl TrainingBatch {
    /// Draws timesteps and noise for every example. Randomness is consumed
    /// example by example, timestep before noise.
    pub fn sample<R: Rng + ?Sized>(
        examples: Vec<(ImageTensor, TextContext)>,
        steps: usize,
        estimator: Estimator,
        rng: &mut R,
    ) -> Self {
        let items = examples
            .into_iter()
            .map(|(x0, ctx)| {
                let draws = match estimator {
                    Estimator::Stochastic => {
                        let t = rng.random_range(1..=steps);
                        vec![NoiseDraw {
                            t,
                            eps: ImageTensor::randn(x0.shape, rng),
                        }]
                    }
                    Estimator::Exact => (1..=steps)
                        .map(|t| NoiseDraw {
                            t,
                            eps: ImageTensor::randn(x0.shape, rng),
                        })
                        .collect(),
                };
                BatchItem { x0, ctx, draws }
            })
            .collect();
        Self { items, estimator }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Factor applied to every per-draw KL so that the batch total estimates
    /// the per-example objective `Σ_t α_t·KL_t`.
    fn draw_scale(&self, steps: usize) -> f64 {
        let b = self.items.len() as f64;
        match self.estimator {
            Estimator::Stochastic => steps as f64 / b,
            Estimator::Exact => 1.0 / b,
        }
    }
}

/// Per-timestep decomposition of a loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted KL mass attributed to each timestep (index `t - 1`).
    pub per_t: Vec<f64>,
    pub weights_applied: Vec<f64>,
    /// Number of draws that landed on each timestep.
    pub draws: Vec<usize>,
}

impl LossBreakdown {
    fn new(weights: &[f64]) -> Self {
        Self {
            total: 0.0,
            per_t: vec![0.0; weights.len()],
            weights_applied: weights.to_vec(),
            draws: vec![0; weights.len()],
        }
    }

    fn finish(&mut self) {
        self.total = self
            .weights_applied
            .iter()
            .zip(&self.per_t)
            .map(|(w, l)| w * l)
            .sum();
    }
}

/// KL of the posterior against the model's reverse step, together with its
/// gradient with respect to `ε̂`.
fn draw_term(
    x0: &ImageTensor,
    xt: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<(f64, ImageTensor)> {
    let post = q_posterior(x0, xt, t, sched)?;
    let model = mu_from_eps(xt, t, eps_hat, sched)?;
    let kl = gaussian_kl(&post, &model)?;
    // ∂KL/∂μ_θ = (μ_θ − μ_post)/β̃_t and ∂μ_θ/∂ε̂ = −β_t/(√α_t·√(1−ᾱ_t))
    let dmu_deps = -sched.beta(t) / (libm::sqrt(sched.alpha(t)) * libm::sqrt(1.0 - sched.alpha_bar(t)));
    let grad = model
        .mean
        .lincomb(1.0, &post.mean, -1.0)
        .scaled(dmu_deps / model.var);
    Ok((kl, grad))
}

fn check_weights(weights: &[f64], sched: &NoiseSchedule) -> Result<()> {
    if weights.len() != sched.steps() {
        return Err(Error::Shape(format!(
            "{} weights for {} timesteps",
            weights.len(),
            sched.steps()
        )));
    }
    Ok(())
}

/// Objective with explicit per-timestep weights (index `t - 1`).
pub fn loss_with_weights<M: EpsModel + ?Sized>(
    model: &M,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    weights: &[f64],
) -> Result<LossBreakdown> {
    check_weights(weights, sched)?;
    let scale = batch.draw_scale(sched.steps());
    let mut out = LossBreakdown::new(weights);
    for item in &batch.items {
        for draw in &item.draws {
            let xt = q_sample_closed(&item.x0, draw.t, sched, &draw.eps)?;
            let eps_hat = model.predict_eps(&xt, draw.t, &item.ctx)?;
            let (kl, _) = draw_term(&item.x0, &xt, draw.t, &eps_hat, sched)?;
            out.per_t[draw.t - 1] += scale * kl;
            out.draws[draw.t - 1] += 1;
        }
    }
    out.finish();
    Ok(out)
}

/// Unweighted variational bound: every `α_t = 1`.
pub fn elbo_loss<M: EpsModel + ?Sized>(
    model: &M,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
) -> Result<LossBreakdown> {
    loss_with_weights(model, batch, sched, &vec![1.0; sched.steps()])
}

/// Variational bound with per-timestep KL weights `α_t`.
pub fn weighted_loss<M: EpsModel + ?Sized>(
    model: &M,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    wcfg: &KLWeightConfig,
) -> Result<LossBreakdown> {
    loss_with_weights(model, batch, sched, &wcfg.weights(sched.steps()))
}

/// [`loss_with_weights`] plus the exact parameter gradient of its total.
pub fn loss_and_grad<M: DifferentiableEpsModel + ?Sized>(
    model: &M,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    weights: &[f64],
) -> Result<(LossBreakdown, M::Grad)> {
    check_weights(weights, sched)?;
    let scale = batch.draw_scale(sched.steps());
    let mut out = LossBreakdown::new(weights);
    let mut grad = model.zero_grad();
    for item in &batch.items {
        for draw in &item.draws {
            let t = draw.t;
            let xt = q_sample_closed(&item.x0, t, sched, &draw.eps)?;
            let mut kl_out = 0.0;
            let x0 = &item.x0;
            let weight = weights[t - 1] * scale;
            model.eps_vjp(
                &xt,
                t,
                &item.ctx,
                &mut |eps_hat| {
                    let (kl, g) = draw_term(x0, &xt, t, eps_hat, sched)?;
                    kl_out = kl;
                    Ok(g.scaled(weight))
                },
                &mut grad,
            )?;
            out.per_t[t - 1] += scale * kl_out;
            out.draws[t - 1] += 1;
        }
    }
    out.finish();
    Ok((out, grad))
}
