//! The operations behind each subcommand, callable without a process.

use std::fs;
use std::path::{Path, PathBuf};

use kldiff_core::conditioning::Vocabulary;
use kldiff_core::metrics::MetricReport;
use kldiff_core::sampler::sample;
use kldiff_core::scene::{gen_dataset, Example};
use kldiff_core::schedules::WeightKind;
use kldiff_core::trainer::{
    ablation_mode, derive_seed, evaluate, AblationMode, Checkpoint, Objective, TrainConfig, Trainer, DATA_STREAM,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use crate::config::{read_config, RunConfig};
use crate::dataset::{ablation_csv, history_csv, metrics_csv, read_dataset, write_dataset};
use crate::embeddings::load_external_embeddings;
use crate::error::{Error, Result};
use crate::ppm::write_image;

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => read_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn with_seed(mut cfg: TrainConfig, seed: Option<u64>) -> TrainConfig {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg
}

/// The dataset a configuration describes: `data.n` scenes drawn from the
/// data stream of `train.seed`.
pub fn generate_dataset(cfg: &TrainConfig) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, DATA_STREAM));
    gen_dataset(cfg.data.n, &mut rng)
}

pub fn cmd_gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<usize> {
    let run = load_run_config(config)?;
    let data = generate_dataset(&with_seed(run.train, seed));
    write_dataset(out, &data)?;
    Ok(data.len())
}

/// Path of the history CSV written next to a checkpoint.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".history.csv");
    checkpoint.with_file_name(name)
}

/// Initializes (loading external token embeddings if configured) and trains.
pub fn train_run(run: &RunConfig, data: &[Example]) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::init(run.train, Vocabulary::scene_grammar())?;
    if let Some(path) = &run.embeddings {
        let fallbacks = load_external_embeddings(path, &ckpt.vocab, &mut ckpt.state.params.embed_table)?;
        ckpt.state.ema.shadow.embed_table = ckpt.state.params.embed_table.clone();
        if fallbacks > 0 {
            eprintln!("warning: {fallbacks} vocabulary tokens have no external embedding and keep their initial rows");
        }
    }
    let mut trainer = Trainer::new(ckpt)?;
    trainer.run(data)?;
    Ok(trainer.into_checkpoint())
}

fn save_with_history(out: &Path, ckpt: &Checkpoint) -> Result<()> {
    save_checkpoint(out, ckpt)?;
    write_atomic(&history_path(out), history_csv(&ckpt.state.history).as_bytes())
}

pub fn cmd_train(
    config: Option<&Path>,
    dataset: &Path,
    out: &Path,
    seed: Option<u64>,
    mode: Option<AblationMode>,
) -> Result<Checkpoint> {
    let mut run = load_run_config(config)?;
    run.train = with_seed(run.train, seed);
    if let Some(m) = mode {
        run.train = ablation_mode(&run.train, m);
    }
    let data = read_dataset(dataset)?;
    let ckpt = train_run(&run, &data)?;
    save_with_history(out, &ckpt)?;
    Ok(ckpt)
}

/// Writes `sample_{i}.ppm` files into `out_dir`; nothing is written unless
/// every sample succeeds.
pub fn cmd_sample(checkpoint: &Path, caption: &str, n: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(kldiff_core::Error::InvalidInput("--n must be at least 1".into()).into());
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = &ckpt.config;
    let sched = cfg.schedule.build()?;
    let ctx = ckpt.context(caption);
    let images = sample(ckpt.sampling_params(), cfg.model.image, &ctx, &sched, seed, n, 1.0)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(n);
    for (i, img) in images.iter().enumerate() {
        let p = out_dir.join(format!("sample_{i}.ppm"));
        write_image(&p, img)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Which ablation a configuration corresponds to.
pub fn infer_mode(cfg: &TrainConfig) -> AblationMode {
    let uniform = cfg.train.objective == Objective::Elbo || cfg.weights.kind == WeightKind::Uniform;
    match (cfg.guidance.unconditional, uniform) {
        (false, false) => AblationMode::Full,
        (true, false) => AblationMode::NoLlm,
        (false, true) => AblationMode::NoKl,
        (true, true) => AblationMode::Neither,
    }
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, seed: u64, n_gen: Option<usize>) -> Result<MetricReport> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    if let Some(n) = n_gen {
        ckpt.config.metrics.n_gen = n;
        ckpt.config.metrics.validate()?;
    }
    let data = read_dataset(dataset)?;
    let run_id = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(evaluate(&ckpt, &data, seed, &run_id, infer_mode(&ckpt.config).as_str())?)
}

/// Trains and evaluates every ablation mode on one dataset. Writes
/// `{mode}.ckpt` and `{mode}.ckpt.history.csv` per mode, plus
/// `ablation.csv` and `metrics.csv`, into `out_dir`.
pub fn cmd_ablate(config: Option<&Path>, dataset: Option<&Path>, seed: u64, out_dir: &Path) -> Result<Vec<MetricReport>> {
    let run = load_run_config(config)?;
    let base = with_seed(run.train, Some(seed));
    let data = match dataset {
        Some(p) => read_dataset(p)?,
        None => generate_dataset(&base),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut reports = Vec::new();
    for mode in AblationMode::ALL {
        let mode_run = RunConfig {
            train: ablation_mode(&base, mode),
            embeddings: run.embeddings.clone(),
        };
        let ckpt = train_run(&mode_run, &data)?;
        let path = out_dir.join(format!("{}.ckpt", mode.as_str()));
        save_with_history(&path, &ckpt)?;
        reports.push(evaluate(&ckpt, &data, seed, &format!("seed{seed}"), mode.as_str())?);
    }
    write_atomic(&out_dir.join("ablation.csv"), ablation_csv(&reports).as_bytes())?;
    write_atomic(&out_dir.join("metrics.csv"), metrics_csv(&reports).as_bytes())?;
    Ok(reports)
}
