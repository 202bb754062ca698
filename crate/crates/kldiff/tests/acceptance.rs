//! Acceptance suite. Runs every criterion in order and prints one PASS or
//! FAIL line each; exits non-zero if any fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 9`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use kldiff::checkpoint::{load_checkpoint, save_checkpoint};
use kldiff::commands::{cmd_eval, generate_dataset, train_run};
use kldiff::config::{read_config, RunConfig};
use kldiff::dataset::write_dataset;
use kldiff_core::conditioning::{TextContext, Vocabulary};
use kldiff_core::denoiser::{backward, DenoiserConfig, DenoiserParams};
use kldiff_core::diffusion::{
    elbo_loss, gaussian_kl, loss_and_grad, q_sample_closed, q_sample_step, weighted_loss, DifferentiableEpsModel,
    EpsModel, Estimator, GaussianParams, TrainingBatch,
};
use kldiff_core::metrics::{alignment_score, frechet_distance, inception_score, AttributeOracle, FeatureStats};
use kldiff_core::params::ParamSet;
use kldiff_core::scene::{gen_dataset, parse_caption, Color, Position, Shape};
use kldiff_core::schedules::{KLWeightConfig, NoiseSchedule, ScheduleConfig};
use kldiff_core::tensor::{ImageShape, ImageTensor, Matrix};
use kldiff_core::trainer::{
    ablation_mode, evaluate, AblationMode, Checkpoint, Objective, OptimizerConfig, OptimizerState, TrainConfig,
    Trainer,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = fn() -> Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: Check,
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        id: 1,
        name: "gradient exactness",
        limit: Duration::from_secs(120),
        run: gradient_exactness,
    },
    Criterion {
        id: 2,
        name: "forward-process composition",
        limit: Duration::from_secs(60),
        run: forward_composition,
    },
    Criterion {
        id: 3,
        name: "gaussian kl vs monte carlo",
        limit: Duration::from_secs(60),
        run: kl_monte_carlo,
    },
    Criterion {
        id: 4,
        name: "perfect denoiser",
        limit: Duration::from_secs(10),
        run: perfect_denoiser,
    },
    Criterion {
        id: 5,
        name: "analytic gaussian learning",
        limit: Duration::from_secs(300),
        run: gaussian_learning,
    },
    Criterion {
        id: 6,
        name: "ablation ordering",
        limit: Duration::from_secs(3600),
        run: ablation_ordering,
    },
    Criterion {
        id: 7,
        name: "uniform weights equal elbo",
        limit: Duration::from_secs(300),
        run: uniform_equivalence,
    },
    Criterion {
        id: 8,
        name: "determinism and persistence",
        limit: Duration::from_secs(600),
        run: resume_determinism,
    },
    Criterion {
        id: 9,
        name: "metric formulas",
        limit: Duration::from_secs(10),
        run: metric_oracles,
    },
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.limit => Err(format!("{detail}; over the {}s budget", c.limit.as_secs())),
            other => other,
        };
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {} {}: {verdict} ({detail}; {:.1}s)", c.id, c.name, took.as_secs_f64());
        failed += usize::from(outcome.is_err());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn scene_batch(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Vec<(ImageTensor, TextContext)> {
    let vocab = Vocabulary::scene_grammar();
    let data = gen_dataset(3, rng);
    let gates = [1.0, 0.6, 0.0];
    data.iter()
        .zip(gates)
        .map(|(e, g)| {
            let ctx = if g == 0.0 {
                TextContext::null(8)
            } else {
                TextContext::from_caption(&e.caption, &vocab, 8, g)
            };
            assert_eq!(e.image.shape, cfg.image);
            (e.image.clone(), ctx)
        })
        .collect()
}

fn gradient_exactness() -> Result<String, String> {
    let cfg = DenoiserConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // move every array off its initial value so no gradient is structurally zero
    let mut params = DenoiserParams::init(cfg, &mut rng).map_err(|e| e.to_string())?;
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v += 0.1 * normal(&mut rng);
        }
    }
    let sched = ScheduleConfig::scaled_linear(100).build().map_err(|e| e.to_string())?;
    let wcfg = KLWeightConfig::default();
    let batch = TrainingBatch::sample(scene_batch(&cfg, &mut rng), 100, Estimator::Stochastic, &mut rng);
    let (_, grads) = backward(&params, &batch, &sched, &wcfg).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    // one scalar from every array, the rest uniformly over all scalars
    let lens: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = lens.iter().sum();
    let mut picks: Vec<(usize, usize)> = lens.iter().enumerate().map(|(a, &n)| (a, rng.random_range(0..n))).collect();
    while picks.len() < 256 {
        let mut k = rng.random_range(0..total);
        let mut a = 0;
        while k >= lens[a] {
            k -= lens[a];
            a += 1;
        }
        picks.push((a, k));
    }

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let names = params.names();
    for &(a, i) in &picks {
        let loss_at = |delta: f64| {
            let mut p = params.clone();
            p.slices_mut()[a][i] += delta;
            weighted_loss(&p, &batch, &sched, &wcfg).map(|l| l.total)
        };
        let fd = (loss_at(h).map_err(|e| e.to_string())? - loss_at(-h).map_err(|e| e.to_string())?) / (2.0 * h);
        let an = analytic[a][i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_at = format!("{}[{i}]", names[a]);
        }
    }
    ensure(
        worst < 1e-4,
        format!("worst relative error {worst:.2e} at {worst_at} over {} parameters", picks.len()),
    )
}

fn forward_composition() -> Result<String, String> {
    let sched = ScheduleConfig::scaled_linear(100).build().map_err(|e| e.to_string())?;
    let shape = ImageShape::new(1, 1, 3);
    let x0 = ImageTensor::from_vec(shape, vec![0.8, -0.3, 0.1]).map_err(|e| e.to_string())?;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut closed = vec![Vec::with_capacity(n); 3];
    let mut composed = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let eps = ImageTensor::randn(shape, &mut rng);
        let c = q_sample_closed(&x0, 5, &sched, &eps).map_err(|e| e.to_string())?;
        let mut x = x0.clone();
        for t in 1..=5 {
            x = q_sample_step(&x, t, &sched, &ImageTensor::randn(shape, &mut rng)).map_err(|e| e.to_string())?;
        }
        for p in 0..3 {
            closed[p].push(c.data[p]);
            composed[p].push(x.data[p]);
        }
    }
    let mut worst: f64 = 0.0;
    for p in 0..3 {
        let (m1, v1) = mean_var(&closed[p]);
        let (m2, v2) = mean_var(&composed[p]);
        let nf = n as f64;
        let mean_z = (m1 - m2).abs() / ((v1 + v2) / nf).sqrt();
        // the variance of a gaussian sample variance is 2σ⁴/(n−1)
        let var_z = (v1 - v2).abs() / ((2.0 * v1 * v1 + 2.0 * v2 * v2) / (nf - 1.0)).sqrt();
        worst = worst.max(mean_z).max(var_z);
    }
    ensure(worst < 4.0, format!("largest deviation {worst:.2}σ over 3 pixels, 10^5 draws"))
}

fn kl_monte_carlo() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(1..=4);
        let shape = ImageShape::new(1, 1, d);
        let p = GaussianParams {
            mean: ImageTensor::randn(shape, &mut rng),
            var: rng.random_range(0.2..2.0),
        };
        let q = GaussianParams {
            mean: ImageTensor::randn(shape, &mut rng),
            var: rng.random_range(0.2..2.0),
        };
        let kl = gaussian_kl(&p, &q).map_err(|e| e.to_string())?;
        let log_density = |g: &GaussianParams, x: &[f64]| {
            let sq: f64 = x.iter().zip(&g.mean.data).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * d as f64 * (2.0 * std::f64::consts::PI * g.var).ln() - sq / (2.0 * g.var)
        };
        let mut x = vec![0.0; d];
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            for (xi, m) in x.iter_mut().zip(&p.mean.data) {
                *xi = m + p.var.sqrt() * normal(&mut rng);
            }
            samples.push(log_density(&p, &x) - log_density(&q, &x));
        }
        let (m, v) = mean_var(&samples);
        let se = (v / n as f64).sqrt();
        worst = worst.max((kl - m).abs() / se);
    }
    ensure(worst < 3.0, format!("largest deviation {worst:.2} standard errors over 20 cases"))
}

/// Predicts the exact noise that carries a known clean image to `xt`.
struct KnownImage<'a> {
    x0: &'a ImageTensor,
    sched: &'a NoiseSchedule,
}

impl EpsModel for KnownImage<'_> {
    fn predict_eps(&self, xt: &ImageTensor, t: usize, _ctx: &TextContext) -> kldiff_core::Result<ImageTensor> {
        let ab = self.sched.alpha_bar(t);
        Ok(xt.lincomb(1.0 / (1.0 - ab).sqrt(), self.x0, -(ab / (1.0 - ab)).sqrt()))
    }
}

fn perfect_denoiser() -> Result<String, String> {
    let sched = ScheduleConfig::scaled_linear(100).build().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for e in gen_dataset(8, &mut rng) {
        let model = KnownImage {
            x0: &e.image,
            sched: &sched,
        };
        let batch = TrainingBatch::sample(vec![(e.image.clone(), TextContext::null(8))], 100, Estimator::Exact, &mut rng);
        let loss = elbo_loss(&model, &batch, &sched).map_err(|e| e.to_string())?;
        worst = worst.max(loss.per_t.iter().cloned().fold(0.0, f64::max));
    }
    ensure(worst < 1e-9, format!("largest per-timestep term {worst:.2e} over 8 images × 100 timesteps"))
}

/// `ε̂ = c_t·x_t` with one learnable coefficient per timestep.
struct LinearEpsModel {
    coef: Vec<f64>,
}

impl EpsModel for LinearEpsModel {
    fn predict_eps(&self, xt: &ImageTensor, t: usize, _ctx: &TextContext) -> kldiff_core::Result<ImageTensor> {
        Ok(xt.scaled(self.coef[t - 1]))
    }
}

impl DifferentiableEpsModel for LinearEpsModel {
    type Grad = Vec<f64>;

    fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.coef.len()]
    }

    fn eps_vjp(
        &self,
        xt: &ImageTensor,
        t: usize,
        ctx: &TextContext,
        upstream: &mut dyn FnMut(&ImageTensor) -> kldiff_core::Result<ImageTensor>,
        grad: &mut Vec<f64>,
    ) -> kldiff_core::Result<()> {
        let d = upstream(&self.predict_eps(xt, t, ctx)?)?;
        grad[t - 1] += d.data.iter().zip(&xt.data).map(|(g, x)| g * x).sum::<f64>();
        Ok(())
    }
}

fn gaussian_learning() -> Result<String, String> {
    let sigma: f64 = 0.5;
    let sched = ScheduleConfig::scaled_linear(100).build().map_err(|e| e.to_string())?;
    let shape = ImageShape::new(1, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let data: Vec<ImageTensor> = (0..4096).map(|_| ImageTensor::randn(shape, &mut rng).scaled(sigma)).collect();
    let weights = vec![1.0; 100];
    let mut model = LinearEpsModel { coef: vec![0.0; 100] };
    let mut opt = OptimizerState::new(OptimizerConfig::adam(0.05), &model.coef);
    for step in 0..2000 {
        let examples = (0..64)
            .map(|_| (data[rng.random_range(0..data.len())].clone(), TextContext::null(1)))
            .collect();
        let batch = TrainingBatch::sample(examples, 100, Estimator::Exact, &mut rng);
        let (_, grad) = loss_and_grad(&model, &batch, &sched, &weights).map_err(|e| e.to_string())?;
        opt.config.lr = 0.05 / (1.0 + step as f64 / 50.0);
        opt.apply(&mut model.coef, &grad).map_err(|e| e.to_string())?;
    }
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for t in [2, 5, 20] {
        let ab = sched.alpha_bar(t);
        let optimal = (1.0 - ab).sqrt() / (ab * sigma * sigma + 1.0 - ab);
        let learned = model.coef[t - 1];
        let rel = (learned - optimal).abs() / optimal;
        worst = worst.max(rel);
        parts.push(format!("t={t} learned {learned:.4} optimal {optimal:.4}"));
    }
    ensure(worst < 0.05, format!("{}; worst {:.2}%", parts.join(", "), 100.0 * worst))
}

fn ablation_config() -> Result<RunConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.cfg");
    read_config(&path).map_err(|e| e.to_string())
}

/// Mean and spread of the alignment score when every generated attribute
/// is drawn uniformly at random, for the captions an evaluation uses.
fn random_baseline(captions: &[&str], rng: &mut ChaCha8Rng) -> Result<(f64, f64), String> {
    let wants = captions
        .iter()
        .map(|c| parse_caption(c).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let scores: Vec<f64> = (0..4000)
        .map(|_| {
            let hits: usize = wants
                .iter()
                .map(|w| {
                    usize::from(Shape::ALL[rng.random_range(0..Shape::ALL.len())] == w.shape)
                        + usize::from(Color::ALL[rng.random_range(0..Color::ALL.len())] == w.color)
                        + usize::from(Position::ALL[rng.random_range(0..Position::ALL.len())] == w.position)
                })
                .sum();
            hits as f64 / (3 * wants.len()) as f64
        })
        .collect();
    let (m, v) = mean_var(&scores);
    Ok((m, v.sqrt()))
}

fn ablation_ordering() -> Result<String, String> {
    let run = ablation_config()?;
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut base = run.train;
        base.train.seed = seed;
        let data = generate_dataset(&base);
        let report = |mode: AblationMode| {
            let cfg = RunConfig {
                train: ablation_mode(&base, mode),
                embeddings: run.embeddings.clone(),
            };
            let ckpt = train_run(&cfg, &data).map_err(|e| e.to_string())?;
            evaluate(&ckpt, &data, seed, &format!("seed{seed}"), mode.as_str()).map_err(|e| e.to_string())
        };
        let full = report(AblationMode::Full)?;
        let no_llm = report(AblationMode::NoLlm)?;
        let neither = report(AblationMode::Neither)?;

        let captions: Vec<&str> = (0..full.n_samples).map(|i| data[i % data.len()].caption.as_str()).collect();
        let (base_mean, base_sd) = random_baseline(&captions, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let gap = full.alignment - no_llm.alignment;
        rows.push(format!(
            "seed {seed}: align {:.3}/{:.3} fid {:.3}/{:.3}",
            full.alignment, no_llm.alignment, full.fid, neither.fid
        ));
        if gap < 0.15 {
            failures.push(format!("seed {seed}: alignment gap {gap:.3} < 0.15"));
        }
        if (no_llm.alignment - base_mean).abs() > 4.0 * base_sd {
            failures.push(format!(
                "seed {seed}: no_llm alignment {:.3} is not within 4σ of the random baseline {base_mean:.3} ± {base_sd:.3}",
                no_llm.alignment
            ));
        }
        if full.fid >= neither.fid {
            failures.push(format!("seed {seed}: fid(full) {:.3} >= fid(neither) {:.3}", full.fid, neither.fid));
        }
    }
    let summary = format!("full/no_llm alignment, full/neither fid: {}", rows.join("; "));
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", failures.join("; ")))
    }
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.n = 192;
    cfg.train.epochs = 4;
    cfg.finetune.period = 2;
    cfg.metrics.n_gen = 64;
    cfg
}

fn train_checkpoint(cfg: TrainConfig, data: &[kldiff_core::scene::Example]) -> Result<Checkpoint, String> {
    let mut trainer = Trainer::new(Checkpoint::init(cfg, Vocabulary::scene_grammar()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    trainer.run(data).map_err(|e| e.to_string())?;
    Ok(trainer.into_checkpoint())
}

fn uniform_equivalence() -> Result<String, String> {
    let base = small_config();
    let data = generate_dataset(&base);
    let mut weighted = base;
    weighted.weights = KLWeightConfig::UNIFORM;
    weighted.train.objective = Objective::Weighted;
    let mut plain = base;
    plain.train.objective = Objective::Elbo;
    let a = train_checkpoint(weighted, &data)?;
    let b = train_checkpoint(plain, &data)?;
    let buffered = a.state.buffer.len();
    ensure(
        a.state == b.state,
        format!(
            "{} epochs, {} optimizer steps, {buffered} replayed samples; states {}",
            a.state.epoch,
            a.state.optimizer.step,
            if a.state == b.state { "bit-identical" } else { "differ" }
        ),
    )
}

fn resume_determinism() -> Result<String, String> {
    let cfg = small_config();
    let data = generate_dataset(&cfg);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let straight = train_checkpoint(cfg, &data)?;
    let straight_path = dir.path().join("straight.ckpt");
    save_checkpoint(&straight_path, &straight).map_err(|e| e.to_string())?;

    let mut first = Trainer::new(Checkpoint::init(cfg, Vocabulary::scene_grammar()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    first.run_until(&data, 2).map_err(|e| e.to_string())?;
    let mid_path = dir.path().join("mid.ckpt");
    save_checkpoint(&mid_path, first.checkpoint()).map_err(|e| e.to_string())?;
    drop(first);
    let mut second = Trainer::new(load_checkpoint(&mid_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    second.run(&data).map_err(|e| e.to_string())?;
    let resumed_path = dir.path().join("resumed.ckpt");
    save_checkpoint(&resumed_path, second.checkpoint()).map_err(|e| e.to_string())?;

    let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    let same_state = second.checkpoint().state == straight.state;
    let same_bytes = read(&straight_path)? == read(&resumed_path)?;

    let data_path = dir.path().join("data.csv");
    write_dataset(&data_path, &data).map_err(|e| e.to_string())?;
    let eval = || cmd_eval(&straight_path, &data_path, 5, None).map_err(|e| e.to_string());
    let (r1, r2) = (eval()?, eval()?);
    let stable = r1 == r2 && r1.fid.to_bits() == r2.fid.to_bits();
    ensure(
        same_state && same_bytes && stable,
        format!(
            "resumed at epoch 2 of {}: state {}, checkpoint bytes {}; eval rerun {}",
            cfg.train.epochs,
            if same_state { "identical" } else { "differs" },
            if same_bytes { "identical" } else { "differ" },
            if stable { "identical" } else { "differs" },
        ),
    )
}

fn random_stats(rng: &mut ChaCha8Rng) -> FeatureStats {
    let m = Matrix::randn(3, 3, 1.0, rng);
    let mut cov = Matrix::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            cov.data[i * 3 + j] = (0..3).map(|k| m.get(i, k) * m.get(j, k)).sum();
        }
    }
    FeatureStats {
        mean: (0..3).map(|_| normal(rng)).collect(),
        cov,
        n: 100,
    }
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn frechet_oracle(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let ca = DMatrix::from_row_slice(3, 3, &a.cov.data);
    let cb = DMatrix::from_row_slice(3, 3, &b.cov.data);
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let cross = psd_sqrt(&(0.5 * (&inner + inner.transpose()))).trace();
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    mean + ca.trace() + cb.trace() - 2.0 * cross
}

fn metric_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (a, b) = (random_stats(&mut rng), random_stats(&mut rng));
        let ours = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((ours - frechet_oracle(&a, &b)).abs());
    }

    let classes = 96;
    let mut one_hot = Matrix::zeros(classes, classes);
    for i in 0..classes {
        one_hot.set(i, i, 1.0);
    }
    let is = inception_score(&one_hot).map_err(|e| e.to_string())?;

    let data = gen_dataset(500, &mut rng);
    let images: Vec<ImageTensor> = data.iter().map(|e| e.image.clone()).collect();
    let captions: Vec<&str> = data.iter().map(|e| e.caption.as_str()).collect();
    let align = alignment_score(&images, &captions, &AttributeOracle::new(16, 16)).map_err(|e| e.to_string())?;

    ensure(
        worst < 1e-8 && is == classes as f64 && align == 1.0,
        format!(
            "frechet max deviation {worst:.2e} over 50 pairs; one-hot IS {is} for {classes} classes; real-data alignment {align}"
        ),
    )
}
