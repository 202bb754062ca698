//! The learnable noise predictor.
//!
//! A small patch transformer: the noisy image is cut into `P×P` patches,
//! linearly embedded, offset by learned positional rows and a sinusoidal
//! timestep encoding, and passed through `n_blocks` pre-normalized blocks of
//! self-attention, gated cross-attention to the caption, and a two-layer
//! feedforward, each with a residual connection. A final normalization and
//! linear projection give per-patch noise values.
//!
//! Gradients are derived by hand, layer by layer, in [`DenoiserParams::eps_vjp`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::conditioning::{embed_text, sinusoidal_encoding, AttentionParams, TextContext, PAD};
use crate::diffusion::{
    loss_and_grad, DifferentiableEpsModel, EpsModel, LossBreakdown, TrainingBatch,
};
use crate::error::{Error, Result};
use crate::layers::{
    attention_backward, attention_forward, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, Activation, AttentionCache, AttentionGrads, NormCache,
};
use crate::params::ParamSet;
use crate::schedules::{KLWeightConfig, NoiseSchedule};
use crate::tensor::{acc_at_b, matmul, ImageShape, ImageTensor, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub image: ImageShape,
    pub patch: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_k: usize,
    pub n_blocks: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub vocab_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(3, 16, 16),
            patch: 4,
            d_img: 32,
            d_txt: 32,
            d_k: 16,
            n_blocks: 2,
            hidden: 64,
            activation: Activation::Gelu,
            vocab_size: 20,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image.channels,
            self.image.height,
            self.image.width,
            self.patch,
            self.d_img,
            self.d_txt,
            self.d_k,
            self.n_blocks,
            self.hidden,
            self.vocab_size,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        if self.image.height % self.patch != 0 || self.image.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image.height, self.image.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image.height / self.patch) * (self.image.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.image.channels * self.patch * self.patch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_gain: Matrix,
    pub norm1_bias: Matrix,
    pub self_attn: AttentionParams,
    pub norm2_gain: Matrix,
    pub norm2_bias: Matrix,
    pub cross_attn: AttentionParams,
    pub norm3_gain: Matrix,
    pub norm3_bias: Matrix,
    pub ff_w1: Matrix,
    pub ff_b1: Matrix,
    pub ff_w2: Matrix,
    pub ff_b2: Matrix,
}

/// Every learnable array of the noise predictor, including the token
/// embedding table. Also used, zero-initialized, as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub patch_embed: Matrix,
    pub patch_bias: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub out_proj: Matrix,
    pub out_bias: Matrix,
    /// Linear map from each input patch straight to its output patch.
    pub skip_proj: Matrix,
    /// Per-timestep scalar skip gain, read off the timestep encoding.
    pub skip_time: Matrix,
    pub embed_table: Matrix,
}

/// Gradient of a scalar loss with respect to every [`DenoiserParams`] array.
pub type GradientSet = DenoiserParams;

impl DenoiserParams {
    /// All arrays zero, shapes derived from `config`.
    pub fn zeros(config: DenoiserConfig) -> Self {
        let (d, dt, dk, f) = (config.d_img, config.d_txt, config.d_k, config.hidden);
        let block = || BlockParams {
            norm1_gain: Matrix::zeros(1, d),
            norm1_bias: Matrix::zeros(1, d),
            self_attn: AttentionParams {
                w_q: Matrix::zeros(d, dk),
                w_k: Matrix::zeros(d, dk),
                w_v: Matrix::zeros(d, d),
            },
            norm2_gain: Matrix::zeros(1, d),
            norm2_bias: Matrix::zeros(1, d),
            cross_attn: AttentionParams::zeros(d, dt, dk),
            norm3_gain: Matrix::zeros(1, d),
            norm3_bias: Matrix::zeros(1, d),
            ff_w1: Matrix::zeros(d, f),
            ff_b1: Matrix::zeros(1, f),
            ff_w2: Matrix::zeros(f, d),
            ff_b2: Matrix::zeros(1, d),
        };
        Self {
            config,
            patch_embed: Matrix::zeros(config.patch_dim(), d),
            patch_bias: Matrix::zeros(1, d),
            pos_embed: Matrix::zeros(config.n_patches(), d),
            blocks: (0..config.n_blocks).map(|_| block()).collect(),
            final_gain: Matrix::zeros(1, d),
            final_bias: Matrix::zeros(1, d),
            out_proj: Matrix::zeros(d, config.patch_dim()),
            out_bias: Matrix::zeros(1, config.patch_dim()),
            skip_proj: Matrix::zeros(config.patch_dim(), config.patch_dim()),
            skip_time: Matrix::zeros(d, 1),
            embed_table: Matrix::zeros(config.vocab_size, dt),
        }
    }

    /// Fan-in scaled normal weights, unit norm gains, zero biases, and zero
    /// output and skip projections so the initial prediction is exactly zero.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, dt, dk, f) = (config.d_img, config.d_txt, config.d_k, config.hidden);
        let fan = |n: usize| 1.0 / libm::sqrt(n as f64);
        let patch_embed = Matrix::randn(config.patch_dim(), d, fan(config.patch_dim()), rng);
        let pos_embed = Matrix::randn(config.n_patches(), d, 4.0, rng);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            blocks.push(BlockParams {
                norm1_gain: Matrix::filled(1, d, 1.0),
                norm1_bias: Matrix::zeros(1, d),
                self_attn: AttentionParams {
                    w_q: Matrix::randn(d, dk, fan(d), rng),
                    w_k: Matrix::randn(d, dk, fan(d), rng),
                    w_v: Matrix::randn(d, d, fan(d), rng),
                },
                norm2_gain: Matrix::filled(1, d, 1.0),
                norm2_bias: Matrix::zeros(1, d),
                cross_attn: AttentionParams {
                    w_q: Matrix::randn(d, dk, fan(d), rng),
                    w_k: Matrix::randn(dt, dk, fan(dt), rng),
                    w_v: Matrix::randn(dt, d, fan(dt), rng),
                },
                norm3_gain: Matrix::filled(1, d, 1.0),
                norm3_bias: Matrix::zeros(1, d),
                ff_w1: Matrix::randn(d, f, fan(d), rng),
                ff_b1: Matrix::zeros(1, f),
                ff_w2: Matrix::randn(f, d, fan(f), rng),
                ff_b2: Matrix::zeros(1, d),
            });
        }
        let mut embed_table = Matrix::randn(config.vocab_size, dt, 1.0, rng);
        embed_table.row_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
        Ok(Self {
            config,
            patch_embed,
            patch_bias: Matrix::zeros(1, d),
            pos_embed,
            blocks,
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
            out_proj: Matrix::zeros(d, config.patch_dim()),
            out_bias: Matrix::zeros(1, config.patch_dim()),
            skip_proj: Matrix::zeros(config.patch_dim(), config.patch_dim()),
            skip_time: Matrix::zeros(d, 1),
            embed_table,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    fn check_input(&self, xt: &ImageTensor, ctx: &TextContext) -> Result<()> {
        if xt.shape != self.config.image {
            return Err(Error::Shape(format!(
                "denoiser expects {:?}, got {:?}",
                self.config.image, xt.shape
            )));
        }
        if let Some(&bad) = ctx.token_ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// First parameter array (in [`ParamSet`] order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let names = self.names();
        self.slices()
            .iter()
            .zip(names)
            .find(|(s, _)| s.iter().any(|v| !v.is_finite()))
            .map(|(_, n)| n)
    }
}

/// Splits an image into `P×P` patches, row-major over the patch grid; each
/// row lists channel, then patch row, then patch column.
pub fn patchify(img: &ImageTensor, patch: usize) -> Matrix {
    let ImageShape {
        channels,
        height,
        width,
    } = img.shape;
    let (gh, gw) = (height / patch, width / patch);
    let mut out = Matrix::zeros(gh * gw, channels * patch * patch);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut k = 0;
            for c in 0..channels {
                for iy in 0..patch {
                    for ix in 0..patch {
                        row[k] = img.data[(c * height + py * patch + iy) * width + px * patch + ix];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Matrix, shape: ImageShape, patch: usize) -> ImageTensor {
    let ImageShape {
        channels,
        height,
        width,
    } = shape;
    let gw = width / patch;
    let mut img = ImageTensor::zeros(shape);
    for n in 0..patches.rows {
        let (py, px) = (n / gw, n % gw);
        let row = patches.row(n);
        let mut k = 0;
        for c in 0..channels {
            for iy in 0..patch {
                for ix in 0..patch {
                    img.data[(c * height + py * patch + iy) * width + px * patch + ix] = row[k];
                    k += 1;
                }
            }
        }
    }
    img
}

struct CrossCache {
    gate: f64,
    attn: AttentionCache,
}

struct BlockCache {
    h_in: Matrix,
    norm1: NormCache,
    u1: Matrix,
    self_attn: AttentionCache,
    norm2: NormCache,
    u2: Matrix,
    cross: Option<CrossCache>,
    norm3: NormCache,
    u3: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

struct ForwardCache {
    patches: Matrix,
    time_enc: Vec<f64>,
    text: Option<Matrix>,
    blocks: Vec<BlockCache>,
    norm_final: NormCache,
    u_final: Matrix,
}

impl DenoiserParams {
    /// Time-modulated token features, or `None` when the caption cannot
    /// reach the image (dropped, all PAD, or zero gate).
    fn text_features(&self, t: usize, ctx: &TextContext) -> Result<Option<Matrix>> {
        if !ctx.is_active() {
            return Ok(None);
        }
        let mut text = embed_text(&ctx.token_ids, &self.embed_table)?;
        let enc = sinusoidal_encoding(t, self.config.d_txt);
        for (l, &id) in ctx.token_ids.iter().enumerate() {
            if id != PAD {
                for (v, e) in text.row_mut(l).iter_mut().zip(&enc) {
                    *v += e;
                }
            }
        }
        Ok(Some(text))
    }

    fn forward(&self, xt: &ImageTensor, t: usize, ctx: &TextContext) -> Result<(Matrix, ForwardCache)> {
        self.check_input(xt, ctx)?;
        let cfg = &self.config;
        let patches = patchify(xt, cfg.patch);
        let time_enc = sinusoidal_encoding(t, cfg.d_img);
        let mut h = linear_forward(&patches, &self.patch_embed, &self.patch_bias);
        h.add_assign(&self.pos_embed);
        h.add_row_broadcast(&time_enc);

        let text = self.text_features(t, ctx)?;
        let mask = ctx.mask();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for bp in &self.blocks {
            let h_in = h.clone();
            let (u1, norm1) = layer_norm_forward(&h, &bp.norm1_gain, &bp.norm1_bias);
            let (sa, self_attn) =
                attention_forward(&u1, &u1, None, &bp.self_attn.w_q, &bp.self_attn.w_k, &bp.self_attn.w_v);
            h.add_assign(&sa);

            let (u2, norm2) = layer_norm_forward(&h, &bp.norm2_gain, &bp.norm2_bias);
            let cross = match &text {
                Some(text) => {
                    let (mut ca, attn) = attention_forward(
                        &u2,
                        text,
                        Some(&mask),
                        &bp.cross_attn.w_q,
                        &bp.cross_attn.w_k,
                        &bp.cross_attn.w_v,
                    );
                    ca.scale(ctx.gate);
                    h.add_assign(&ca);
                    Some(CrossCache { gate: ctx.gate, attn })
                }
                None => None,
            };

            let (u3, norm3) = layer_norm_forward(&h, &bp.norm3_gain, &bp.norm3_bias);
            let pre_act = linear_forward(&u3, &bp.ff_w1, &bp.ff_b1);
            let act = Matrix::from_vec(
                pre_act.rows,
                pre_act.cols,
                pre_act.data.iter().map(|&v| cfg.activation.apply(v)).collect(),
            );
            let ff = linear_forward(&act, &bp.ff_w2, &bp.ff_b2);
            h.add_assign(&ff);

            blocks.push(BlockCache {
                h_in,
                norm1,
                u1,
                self_attn,
                norm2,
                u2,
                cross,
                norm3,
                u3,
                pre_act,
                act,
            });
        }
        let (u_final, norm_final) = layer_norm_forward(&h, &self.final_gain, &self.final_bias);
        let mut out = linear_forward(&u_final, &self.out_proj, &self.out_bias);
        out.add_assign(&matmul(&patches, &self.skip_proj));
        let gain: f64 = time_enc.iter().zip(&self.skip_time.data).map(|(e, w)| e * w).sum();
        for (o, x) in out.data.iter_mut().zip(&patches.data) {
            *o += gain * x;
        }
        Ok((
            out,
            ForwardCache {
                patches,
                time_enc,
                text,
                blocks,
                norm_final,
                u_final,
            },
        ))
    }

    fn backward_from(
        &self,
        d_out: &Matrix,
        cache: &ForwardCache,
        ctx: &TextContext,
        g: &mut DenoiserParams,
    ) {
        let cfg = &self.config;
        acc_at_b(&cache.patches, d_out, &mut g.skip_proj);
        let d_gain: f64 = cache.patches.data.iter().zip(&d_out.data).map(|(x, d)| x * d).sum();
        for (gw, e) in g.skip_time.data.iter_mut().zip(&cache.time_enc) {
            *gw += d_gain * e;
        }
        let mut d_h = linear_backward(d_out, &cache.u_final, &self.out_proj, &mut g.out_proj, &mut g.out_bias);
        d_h = layer_norm_backward(&d_h, &cache.norm_final, &self.final_gain, &mut g.final_gain, &mut g.final_bias);

        let mut d_text = cache.text.as_ref().map(|t| Matrix::zeros(t.rows, t.cols));
        for (bi, bc) in cache.blocks.iter().enumerate().rev() {
            let bp = &self.blocks[bi];
            let gb = &mut g.blocks[bi];

            // feedforward residual
            let d_act = linear_backward(&d_h, &bc.act, &bp.ff_w2, &mut gb.ff_w2, &mut gb.ff_b2);
            let mut d_pre = d_act;
            for (dv, &x) in d_pre.data.iter_mut().zip(&bc.pre_act.data) {
                *dv *= cfg.activation.derivative(x);
            }
            let d_u3 = linear_backward(&d_pre, &bc.u3, &bp.ff_w1, &mut gb.ff_w1, &mut gb.ff_b1);
            let d_branch = layer_norm_backward(&d_u3, &bc.norm3, &bp.norm3_gain, &mut gb.norm3_gain, &mut gb.norm3_bias);
            d_h.add_assign(&d_branch);

            // gated cross-attention residual
            if let (Some(cc), Some(text), Some(d_text)) = (&bc.cross, &cache.text, d_text.as_mut()) {
                let mut d_ca = d_h.clone();
                d_ca.scale(cc.gate);
                let (d_u2, d_kv) = attention_backward(
                    &d_ca,
                    &bc.u2,
                    text,
                    &cc.attn,
                    &bp.cross_attn.w_q,
                    &bp.cross_attn.w_k,
                    &bp.cross_attn.w_v,
                    AttentionGrads {
                        w_q: &mut gb.cross_attn.w_q,
                        w_k: &mut gb.cross_attn.w_k,
                        w_v: &mut gb.cross_attn.w_v,
                    },
                );
                d_text.add_assign(&d_kv);
                let d_branch = layer_norm_backward(&d_u2, &bc.norm2, &bp.norm2_gain, &mut gb.norm2_gain, &mut gb.norm2_bias);
                d_h.add_assign(&d_branch);
            }

            // self-attention residual
            let (mut d_u1, d_kv) = attention_backward(
                &d_h,
                &bc.u1,
                &bc.u1,
                &bc.self_attn,
                &bp.self_attn.w_q,
                &bp.self_attn.w_k,
                &bp.self_attn.w_v,
                AttentionGrads {
                    w_q: &mut gb.self_attn.w_q,
                    w_k: &mut gb.self_attn.w_k,
                    w_v: &mut gb.self_attn.w_v,
                },
            );
            d_u1.add_assign(&d_kv);
            let d_branch = layer_norm_backward(&d_u1, &bc.norm1, &bp.norm1_gain, &mut gb.norm1_gain, &mut gb.norm1_bias);
            d_h.add_assign(&d_branch);
            debug_assert_eq!(bc.h_in.shape(), d_h.shape());
        }

        // embedding stage; the timestep encoding is a constant
        g.pos_embed.add_assign(&d_h);
        linear_backward(&d_h, &cache.patches, &self.patch_embed, &mut g.patch_embed, &mut g.patch_bias);

        if let Some(d_text) = d_text {
            for (l, &id) in ctx.token_ids.iter().enumerate() {
                if id != PAD {
                    for (gv, dv) in g.embed_table.row_mut(id).iter_mut().zip(d_text.row(l)) {
                        *gv += dv;
                    }
                }
            }
        }
    }

    /// Block-level activations for inspection: the residual stream entering
    /// each block, then the final stream.
    pub fn residual_streams(&self, xt: &ImageTensor, t: usize, ctx: &TextContext) -> Result<Vec<Matrix>> {
        let (out, cache) = self.forward(xt, t, ctx)?;
        let mut v: Vec<Matrix> = cache.blocks.into_iter().map(|b| b.h_in).collect();
        v.push(out);
        Ok(v)
    }
}

impl EpsModel for DenoiserParams {
    fn predict_eps(&self, xt: &ImageTensor, t: usize, ctx: &TextContext) -> Result<ImageTensor> {
        let (out, _) = self.forward(xt, t, ctx)?;
        Ok(unpatchify(&out, self.config.image, self.config.patch))
    }
}

impl DifferentiableEpsModel for DenoiserParams {
    type Grad = GradientSet;

    fn zero_grad(&self) -> GradientSet {
        self.zeros_like()
    }

    fn eps_vjp(
        &self,
        xt: &ImageTensor,
        t: usize,
        ctx: &TextContext,
        upstream: &mut dyn FnMut(&ImageTensor) -> Result<ImageTensor>,
        grad: &mut GradientSet,
    ) -> Result<()> {
        let (out, cache) = self.forward(xt, t, ctx)?;
        let eps_hat = unpatchify(&out, self.config.image, self.config.patch);
        let d_eps = upstream(&eps_hat)?;
        eps_hat.check_shape(&d_eps, "upstream gradient")?;
        let d_out = patchify(&d_eps, self.config.patch);
        self.backward_from(&d_out, &cache, ctx, grad);
        Ok(())
    }
}

/// Weighted objective and its exact gradient with respect to every parameter array.
pub fn backward(
    params: &DenoiserParams,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    wcfg: &KLWeightConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    backward_with_weights(params, batch, sched, &wcfg.weights(sched.steps()))
}

pub fn backward_with_weights(
    params: &DenoiserParams,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    weights: &[f64],
) -> Result<(LossBreakdown, GradientSet)> {
    let (loss, grads) = loss_and_grad(params, batch, sched, weights)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(String::from("loss")));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((loss, grads))
}
