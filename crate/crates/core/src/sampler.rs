//! Ancestral sampling through the learned reverse process.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::TextContext;
use crate::diffusion::{mu_from_eps, EpsModel};
use crate::error::{Error, Result};
use crate::schedules::NoiseSchedule;
use crate::tensor::{ImageShape, ImageTensor};

/// Noise prediction with optional guidance scaling:
/// `ε̂_uncond + s·(ε̂_cond − ε̂_uncond)`. `s = 1` evaluates only the
/// conditional branch and `s = 0` only the unconditional one.
pub fn guided_eps<M: EpsModel + ?Sized>(
    model: &M,
    xt: &ImageTensor,
    t: usize,
    ctx: &TextContext,
    scale: f64,
) -> Result<ImageTensor> {
    if scale == 1.0 {
        return model.predict_eps(xt, t, ctx);
    }
    let uncond = model.predict_eps(xt, t, &ctx.dropped())?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let cond = model.predict_eps(xt, t, ctx)?;
    Ok(uncond.lincomb(1.0 - scale, &cond, scale))
}

/// One reverse step `x_t → x_{t-1}`. The noise is ignored at `t = 1`.
pub fn p_sample_step<M: EpsModel + ?Sized>(
    model: &M,
    xt: &ImageTensor,
    t: usize,
    ctx: &TextContext,
    sched: &NoiseSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    p_sample_step_guided(model, xt, t, ctx, sched, noise, 1.0)
}

pub fn p_sample_step_guided<M: EpsModel + ?Sized>(
    model: &M,
    xt: &ImageTensor,
    t: usize,
    ctx: &TextContext,
    sched: &NoiseSchedule,
    noise: &ImageTensor,
    scale: f64,
) -> Result<ImageTensor> {
    sched.check_t(t)?;
    xt.check_shape(noise, "p_sample_step noise")?;
    let eps_hat = guided_eps(model, xt, t, ctx, scale)?;
    let step = mu_from_eps(xt, t, &eps_hat, sched)?;
    if t == 1 {
        return Ok(step.mean);
    }
    Ok(step.mean.lincomb(1.0, noise, libm::sqrt(step.var)))
}

/// Noise stream of chain `chain` under `seed`. Chains never share a
/// stream, so any subset of chains can be regenerated independently.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Runs one reverse chain from `x_T ~ N(0, I)` without clamping the result.
pub fn sample_chain<M: EpsModel + ?Sized>(
    model: &M,
    shape: ImageShape,
    ctx: &TextContext,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    scale: f64,
) -> Result<ImageTensor> {
    let mut x = ImageTensor::randn(shape, rng);
    let zero = ImageTensor::zeros(shape);
    for t in (1..=sched.steps()).rev() {
        let noise = if t > 1 {
            ImageTensor::randn(shape, rng)
        } else {
            zero.clone()
        };
        x = p_sample_step_guided(model, &x, t, ctx, sched, &noise, scale)?;
    }
    Ok(x)
}

/// `n` unclamped samples; chain `i` uses [`chain_rng`]`(seed, i)`.
pub fn sample_raw<M: EpsModel + ?Sized>(
    model: &M,
    shape: ImageShape,
    ctx: &TextContext,
    sched: &NoiseSchedule,
    seed: u64,
    n: usize,
    scale: f64,
) -> Result<Vec<ImageTensor>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput("guidance scale must be finite and non-negative".into()));
    }
    (0..n)
        .map(|i| sample_chain(model, shape, ctx, sched, &mut chain_rng(seed, i as u64), scale))
        .collect()
}

/// `n` samples clamped to the data range `[-1, 1]`.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    shape: ImageShape,
    ctx: &TextContext,
    sched: &NoiseSchedule,
    seed: u64,
    n: usize,
    scale: f64,
) -> Result<Vec<ImageTensor>> {
    let raw = sample_raw(model, shape, ctx, sched, seed, n, scale)?;
    raw.into_iter()
        .map(|x| {
            if !x.is_finite() {
                return Err(Error::NonFinite("sample".into()));
            }
            Ok(x.clamp(-1.0, 1.0))
        })
        .collect()
}
