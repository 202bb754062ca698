//! The training loop: weighted-bound minibatch steps with caption dropout
//! and a gated conditioning ramp, a moving-average parameter copy, and
//! periodic self-training rounds that replay the copy's best samples.

mod optim;
mod replay;

pub use optim::{
    adam_step, ema_update, sgd_step, EmaParams, OptimizerConfig, OptimizerKind, OptimizerState,
};
pub use replay::{select_high_confidence, ReplayBuffer, ReplayEntry};

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{TextContext, Vocabulary};
use crate::denoiser::{backward_with_weights, DenoiserConfig, DenoiserParams};
use crate::diffusion::{Estimator, TrainingBatch};
use crate::error::{Error, Result};
use crate::metrics::{
    feature_stats, score_samples, AttributeOracle, FeatureExtractor, MetricReport, MetricsConfig,
};
use crate::sampler::{chain_rng, sample_chain};
use crate::scene::Example;
use crate::schedules::{guidance_gate, GuidanceRamp, KLWeightConfig, NoiseSchedule, ScheduleConfig};
use crate::tensor::ImageTensor;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub ramp: GuidanceRamp,
    /// Every training and sampling context is the null context.
    pub unconditional: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            ramp: GuidanceRamp::default(),
            unconditional: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Every `α_t = 1`, ignoring the weight configuration.
    Elbo,
    Weighted,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Elbo => "elbo",
            Objective::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "elbo" => Some(Objective::Elbo),
            "weighted" => Some(Objective::Weighted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Probability of replacing a caption with the null context.
    pub caption_dropout: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(2e-3),
            caption_dropout: 0.1,
            seed: 0,
            objective: Objective::Weighted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub enabled: bool,
    pub ema_decay: f64,
    /// Epochs between self-training rounds.
    pub period: usize,
    /// Admission threshold on the alignment confidence.
    pub threshold: f64,
    /// Fraction of passing samples kept.
    pub top_fraction: f64,
    /// Share of replayed samples in each minibatch.
    pub mix_ratio: f64,
    pub samples_per_caption: usize,
    pub capacity: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ema_decay: 0.99,
            period: 5,
            threshold: 0.9,
            top_fraction: 0.5,
            mix_ratio: 0.25,
            samples_per_caption: 1,
            capacity: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    /// Token positions per caption.
    pub text_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 2000, text_len: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub weights: KLWeightConfig,
    pub guidance: GuidanceConfig,
    pub model: DenoiserConfig,
    pub train: TrainSection,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.weights.validate()?;
        self.guidance.ramp.validate()?;
        self.model.validate()?;
        self.train.optimizer.validate()?;
        self.metrics.validate()?;
        let bad = |msg: &str| Err(Error::Config(String::from(msg)));
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.train.caption_dropout) {
            return bad("train.caption_dropout must lie in [0, 1]");
        }
        let f = &self.finetune;
        if !(0.0..=1.0).contains(&f.ema_decay) {
            return bad("finetune.ema_decay must lie in [0, 1]");
        }
        if f.enabled && f.period == 0 {
            return bad("finetune.period must be at least 1");
        }
        if !(0.0..=1.0).contains(&f.threshold) {
            return bad("finetune.threshold must lie in [0, 1]");
        }
        if !(f.top_fraction > 0.0 && f.top_fraction <= 1.0) {
            return bad("finetune.top_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&f.mix_ratio) {
            return bad("finetune.mix_ratio must lie in [0, 1)");
        }
        if f.enabled && f.samples_per_caption == 0 {
            return bad("finetune.samples_per_caption must be at least 1");
        }
        if self.data.n == 0 || self.data.text_len == 0 {
            return bad("data.n and data.text_len must be at least 1");
        }
        Ok(())
    }

    /// Per-timestep weights actually applied by the objective.
    pub fn applied_weights(&self) -> Vec<f64> {
        match self.train.objective {
            Objective::Elbo => vec![1.0; self.schedule.steps],
            Objective::Weighted => self.weights.weights(self.schedule.steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    NoLlm,
    NoKl,
    Neither,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoLlm,
        AblationMode::NoKl,
        AblationMode::Neither,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoLlm => "no_llm",
            AblationMode::NoKl => "no_kl",
            AblationMode::Neither => "neither",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Configuration with a component switched off. `NoLlm` removes the text
/// path (null contexts, zero gate); `NoKl` makes the weights uniform.
pub fn ablation_mode(cfg: &TrainConfig, mode: AblationMode) -> TrainConfig {
    let mut out = *cfg;
    if matches!(mode, AblationMode::NoLlm | AblationMode::Neither) {
        out.guidance.unconditional = true;
        out.guidance.ramp = GuidanceRamp::constant(0.0);
    }
    if matches!(mode, AblationMode::NoKl | AblationMode::Neither) {
        out.weights = KLWeightConfig::UNIFORM;
    }
    out
}

/// SplitMix64 finalizer over `master + stream·γ`, for independent sub-seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const INIT_STREAM: u64 = 1;
pub const TRAIN_STREAM: u64 = 2;
pub const DATA_STREAM: u64 = 3;

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Quartiles over timesteps of the epoch-averaged per-timestep KL.
    pub per_t_q1: f64,
    pub per_t_median: f64,
    pub per_t_q3: f64,
    pub gate: f64,
    pub buffer_len: usize,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,per_t_q1,per_t_median,per_t_q3,gate,buffer_size";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.mean_loss, self.per_t_q1, self.per_t_median, self.per_t_q3, self.gate, self.buffer_len
        )
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub ema: EmaParams<DenoiserParams>,
    pub optimizer: OptimizerState,
    pub buffer: ReplayBuffer,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub state: TrainState,
}

impl Checkpoint {
    /// Fresh initialization under `config.train.seed`.
    pub fn init(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if config.model.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the vocabulary has {} tokens",
                config.model.vocab_size,
                vocab.len()
            )));
        }
        let seed = config.train.seed;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
        let params = DenoiserParams::init(config.model, &mut init_rng)?;
        let state = TrainState {
            ema: EmaParams::new(config.finetune.ema_decay, &params)?,
            optimizer: OptimizerState::new(config.train.optimizer, &params),
            buffer: ReplayBuffer::new(config.finetune.capacity, config.finetune.threshold),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, TRAIN_STREAM)),
            history: Vec::new(),
            params,
        };
        Ok(Self { config, vocab, state })
    }

    /// Gate in force for the next epoch, and for sampling after training.
    pub fn gate(&self) -> f64 {
        if self.config.guidance.unconditional {
            return 0.0;
        }
        guidance_gate(&self.config.guidance.ramp, self.state.epoch)
    }

    /// Parameters used for sampling and evaluation.
    pub fn sampling_params(&self) -> &DenoiserParams {
        if self.config.metrics.use_ema {
            &self.state.ema.shadow
        } else {
            &self.state.params
        }
    }

    /// Conditioning for `caption` as the model was trained to see it.
    pub fn context(&self, caption: &str) -> TextContext {
        context_for(&self.config, &self.vocab, caption, self.gate())
    }
}

fn context_for(cfg: &TrainConfig, vocab: &Vocabulary, caption: &str, gate: f64) -> TextContext {
    if cfg.guidance.unconditional {
        TextContext::null(cfg.data.text_len)
    } else {
        TextContext::from_caption(caption, vocab, cfg.data.text_len, gate)
    }
}

/// Sample quartiles with linear interpolation between order statistics.
fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = libm::floor(pos) as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    (q(0.25), q(0.5), q(0.75))
}

pub struct Trainer {
    ckpt: Checkpoint,
    sched: NoiseSchedule,
    weights: Vec<f64>,
    oracle: Option<AttributeOracle>,
}

impl Trainer {
    pub fn new(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let sched = ckpt.config.schedule.build()?;
        let weights = ckpt.config.applied_weights();
        Ok(Self {
            ckpt,
            sched,
            weights,
            oracle: None,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Trains until `config.train.epochs` epochs are complete.
    pub fn run(&mut self, data: &[Example]) -> Result<()> {
        self.run_until(data, self.ckpt.config.train.epochs)
    }

    /// Trains until `epochs` epochs are complete; a no-op if already there.
    pub fn run_until(&mut self, data: &[Example], epochs: usize) -> Result<()> {
        while self.ckpt.state.epoch < epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    /// One pass over `data` in shuffled minibatches, then a self-training
    /// round if one is due.
    pub fn run_epoch(&mut self, data: &[Example]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let cfg = self.ckpt.config;
        let epoch = self.ckpt.state.epoch + 1;
        let gate = self.ckpt.gate();
        let steps = self.sched.steps();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.ckpt.state.rng);

        let mut loss_sum = 0.0;
        let mut per_t = vec![0.0; steps];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let state = &mut self.ckpt.state;
            let mut items: Vec<(&ImageTensor, &str)> =
                chunk.iter().map(|&i| (&data[i].image, data[i].caption.as_str())).collect();
            let ratio = cfg.finetune.mix_ratio;
            if !state.buffer.is_empty() && ratio > 0.0 {
                let extra = libm::round(ratio / (1.0 - ratio) * chunk.len() as f64) as usize;
                for _ in 0..extra {
                    let j = state.rng.random_range(0..state.buffer.len());
                    let e = state.buffer.get(j).expect("index below buffer length");
                    items.push((&e.image, e.caption.as_str()));
                }
            }
            let examples: Vec<(ImageTensor, TextContext)> = items
                .into_iter()
                .map(|(img, cap)| {
                    let drop = state.rng.random::<f64>() < cfg.train.caption_dropout;
                    let ctx = context_for(&cfg, &self.ckpt.vocab, cap, gate);
                    (img.clone(), if drop { ctx.dropped() } else { ctx })
                })
                .collect();
            let batch = TrainingBatch::sample(examples, steps, Estimator::Stochastic, &mut state.rng);
            let (loss, grads) = match backward_with_weights(&state.params, &batch, &self.sched, &self.weights) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !(loss.total.abs() <= DIVERGENCE_LIMIT) {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.total,
                });
            }
            state.optimizer.apply(&mut state.params, &grads)?;
            state.ema.update(&state.params);
            loss_sum += loss.total;
            for (acc, v) in per_t.iter_mut().zip(&loss.per_t) {
                *acc += v;
            }
            batches += 1;
        }

        self.ckpt.state.epoch = epoch;
        if cfg.finetune.enabled && epoch % cfg.finetune.period == 0 {
            self.finetune_round(data, gate)?;
        }
        per_t.iter_mut().for_each(|v| *v /= batches as f64);
        let (q1, median, q3) = quartiles(&per_t);
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            per_t_q1: q1,
            per_t_median: median,
            per_t_q3: q3,
            gate,
            buffer_len: self.ckpt.state.buffer.len(),
        };
        self.ckpt.state.history.push(record);
        Ok(record)
    }

    /// Samples every distinct caption from the moving-average parameters,
    /// scores the samples with the attribute oracle, and admits the best.
    fn finetune_round(&mut self, data: &[Example], gate: f64) -> Result<()> {
        let cfg = self.ckpt.config;
        let captions: BTreeSet<&str> = data.iter().map(|e| e.caption.as_str()).collect();
        let seed: u64 = self.ckpt.state.rng.random();
        let oracle = self
            .oracle
            .get_or_insert_with(|| AttributeOracle::new(cfg.model.image.height, cfg.model.image.width));
        let mut samples = Vec::new();
        let mut scores = Vec::new();
        for (j, cap) in captions.iter().enumerate() {
            let ctx = context_for(&cfg, &self.ckpt.vocab, cap, gate);
            for k in 0..cfg.finetune.samples_per_caption {
                let chain = (j * cfg.finetune.samples_per_caption + k) as u64;
                let mut rng = chain_rng(seed, chain);
                let img = sample_chain(&self.ckpt.state.ema.shadow, cfg.model.image, &ctx, &self.sched, &mut rng, 1.0)?
                    .clamp(-1.0, 1.0);
                scores.push(oracle.match_rate(&img, cap)?);
                samples.push((img, *cap));
            }
        }
        let keep = select_high_confidence(&scores, cfg.finetune.threshold, cfg.finetune.top_fraction)?;
        let epoch = self.ckpt.state.epoch;
        for i in keep {
            let (image, caption) = samples[i].clone();
            self.ckpt.state.buffer.push(ReplayEntry {
                image,
                caption: caption.into(),
                score: scores[i],
                epoch,
            })?;
        }
        Ok(())
    }
}

/// Trains a fresh initialization for `config.train.epochs` epochs.
pub fn train(config: TrainConfig, vocab: Vocabulary, data: &[Example]) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(Checkpoint::init(config, vocab)?)?;
    trainer.run(data)?;
    Ok(trainer.into_checkpoint())
}

/// Generates `config.metrics.n_gen` samples (sample `i` conditioned on the
/// caption of `real[i % len]`, noise stream `i` under `seed`) and scores
/// them against the real images.
pub fn evaluate(ckpt: &Checkpoint, real: &[Example], seed: u64, run_id: &str, mode: &str) -> Result<MetricReport> {
    if real.len() < 2 {
        return Err(Error::InvalidInput("evaluation needs at least 2 real images".into()));
    }
    let cfg = &ckpt.config;
    let sched = cfg.schedule.build()?;
    let model = ckpt.sampling_params();
    let n = cfg.metrics.n_gen;
    let mut generated = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for i in 0..n {
        let cap = real[i % real.len()].caption.as_str();
        let ctx = ckpt.context(cap);
        let img = sample_chain(model, cfg.model.image, &ctx, &sched, &mut chain_rng(seed, i as u64), 1.0)?;
        if !img.is_finite() {
            return Err(Error::NonFinite(format!("generated sample {i}")));
        }
        generated.push(img.clamp(-1.0, 1.0));
        captions.push(cap);
    }
    let extractor = FeatureExtractor::new(cfg.metrics.extractor_seed, cfg.model.image, cfg.metrics.feature_dim);
    let real_images: Vec<ImageTensor> = real.iter().map(|e| e.image.clone()).collect();
    let real_stats = feature_stats(&real_images, &extractor)?;
    let oracle = AttributeOracle::new(cfg.model.image.height, cfg.model.image.width);
    let scores = score_samples(&generated, &captions, &real_stats, &extractor, &oracle)?;
    Ok(MetricReport {
        run_id: run_id.into(),
        mode: mode.into(),
        fid: scores.fid,
        is: scores.is,
        alignment: scores.alignment,
        n_samples: n,
        extractor_seed: cfg.metrics.extractor_seed,
    })
}
