//! Flat `section.key = value` experiment configuration. Unknown keys,
//! repeated keys and unparseable values are all errors.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kldiff_core::layers::Activation;
use kldiff_core::schedules::{ScheduleKind, WeightKind};
use kldiff_core::trainer::{Objective, OptimizerKind, TrainConfig};

use crate::error::{Error, Result};

/// A training configuration plus settings that only make sense with a
/// filesystem.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Optional token-embedding file used to initialize the embedding table.
    pub embeddings: Option<PathBuf>,
}

pub const SECTIONS: [&str; 8] = [
    "schedule", "weights", "guidance", "model", "train", "finetune", "data", "metrics",
];

fn num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn flag(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn word<T>(value: &str, parse: impl Fn(&str) -> Option<T>) -> std::result::Result<T, String> {
    parse(value).ok_or_else(|| format!("unknown value {value:?}"))
}

/// Sets one key of `cfg`. `Ok(false)` means the key is not a training key.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<bool, String> {
    match key {
        "schedule.kind" => cfg.schedule.kind = word(value, ScheduleKind::parse)?,
        "schedule.steps" => cfg.schedule.steps = num(value)?,
        "schedule.beta_min" => cfg.schedule.beta_min = num(value)?,
        "schedule.beta_max" => cfg.schedule.beta_max = num(value)?,
        "weights.kind" => cfg.weights.kind = word(value, WeightKind::parse)?,
        "weights.gamma" => cfg.weights.gamma = num(value)?,
        "weights.normalize" => cfg.weights.normalize = flag(value)?,
        "weights.reverse" => cfg.weights.reverse = flag(value)?,
        "guidance.g_min" => cfg.guidance.ramp.g_min = num(value)?,
        "guidance.g_max" => cfg.guidance.ramp.g_max = num(value)?,
        "guidance.ramp_epochs" => cfg.guidance.ramp.ramp_epochs = num(value)?,
        "guidance.unconditional" => cfg.guidance.unconditional = flag(value)?,
        "model.channels" => cfg.model.image.channels = num(value)?,
        "model.height" => cfg.model.image.height = num(value)?,
        "model.width" => cfg.model.image.width = num(value)?,
        "model.patch" => cfg.model.patch = num(value)?,
        "model.d_img" => cfg.model.d_img = num(value)?,
        "model.d_txt" => cfg.model.d_txt = num(value)?,
        "model.d_k" => cfg.model.d_k = num(value)?,
        "model.n_blocks" => cfg.model.n_blocks = num(value)?,
        "model.hidden" => cfg.model.hidden = num(value)?,
        "model.activation" => cfg.model.activation = word(value, Activation::parse)?,
        "model.vocab_size" => cfg.model.vocab_size = num(value)?,
        "train.epochs" => cfg.train.epochs = num(value)?,
        "train.batch_size" => cfg.train.batch_size = num(value)?,
        "train.optimizer" => cfg.train.optimizer.kind = word(value, OptimizerKind::parse)?,
        "train.lr" => cfg.train.optimizer.lr = num(value)?,
        "train.beta1" => cfg.train.optimizer.beta1 = num(value)?,
        "train.beta2" => cfg.train.optimizer.beta2 = num(value)?,
        "train.eps" => cfg.train.optimizer.eps = num(value)?,
        "train.caption_dropout" => cfg.train.caption_dropout = num(value)?,
        "train.seed" => cfg.train.seed = num(value)?,
        "train.objective" => cfg.train.objective = word(value, Objective::parse)?,
        "finetune.enabled" => cfg.finetune.enabled = flag(value)?,
        "finetune.ema_decay" => cfg.finetune.ema_decay = num(value)?,
        "finetune.period" => cfg.finetune.period = num(value)?,
        "finetune.threshold" => cfg.finetune.threshold = num(value)?,
        "finetune.top_fraction" => cfg.finetune.top_fraction = num(value)?,
        "finetune.mix_ratio" => cfg.finetune.mix_ratio = num(value)?,
        "finetune.samples_per_caption" => cfg.finetune.samples_per_caption = num(value)?,
        "finetune.capacity" => cfg.finetune.capacity = num(value)?,
        "data.n" => cfg.data.n = num(value)?,
        "data.text_len" => cfg.data.text_len = num(value)?,
        "metrics.extractor_seed" => cfg.metrics.extractor_seed = num(value)?,
        "metrics.feature_dim" => cfg.metrics.feature_dim = num(value)?,
        "metrics.n_gen" => cfg.metrics.n_gen = num(value)?,
        "metrics.use_ema" => cfg.metrics.use_ema = flag(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Every training key with its value, in a fixed order. Floats use the
/// shortest representation that parses back to the same bits.
pub fn config_lines(cfg: &TrainConfig) -> Vec<String> {
    let m = &cfg.model;
    let o = &cfg.train.optimizer;
    let f = &cfg.finetune;
    let pairs: Vec<(&str, String)> = vec![
        ("schedule.kind", cfg.schedule.kind.as_str().into()),
        ("schedule.steps", cfg.schedule.steps.to_string()),
        ("schedule.beta_min", format!("{:?}", cfg.schedule.beta_min)),
        ("schedule.beta_max", format!("{:?}", cfg.schedule.beta_max)),
        ("weights.kind", cfg.weights.kind.as_str().into()),
        ("weights.gamma", format!("{:?}", cfg.weights.gamma)),
        ("weights.normalize", cfg.weights.normalize.to_string()),
        ("weights.reverse", cfg.weights.reverse.to_string()),
        ("guidance.g_min", format!("{:?}", cfg.guidance.ramp.g_min)),
        ("guidance.g_max", format!("{:?}", cfg.guidance.ramp.g_max)),
        ("guidance.ramp_epochs", cfg.guidance.ramp.ramp_epochs.to_string()),
        ("guidance.unconditional", cfg.guidance.unconditional.to_string()),
        ("model.channels", m.image.channels.to_string()),
        ("model.height", m.image.height.to_string()),
        ("model.width", m.image.width.to_string()),
        ("model.patch", m.patch.to_string()),
        ("model.d_img", m.d_img.to_string()),
        ("model.d_txt", m.d_txt.to_string()),
        ("model.d_k", m.d_k.to_string()),
        ("model.n_blocks", m.n_blocks.to_string()),
        ("model.hidden", m.hidden.to_string()),
        ("model.activation", m.activation.as_str().into()),
        ("model.vocab_size", m.vocab_size.to_string()),
        ("train.epochs", cfg.train.epochs.to_string()),
        ("train.batch_size", cfg.train.batch_size.to_string()),
        ("train.optimizer", o.kind.as_str().into()),
        ("train.lr", format!("{:?}", o.lr)),
        ("train.beta1", format!("{:?}", o.beta1)),
        ("train.beta2", format!("{:?}", o.beta2)),
        ("train.eps", format!("{:?}", o.eps)),
        ("train.caption_dropout", format!("{:?}", cfg.train.caption_dropout)),
        ("train.seed", cfg.train.seed.to_string()),
        ("train.objective", cfg.train.objective.as_str().into()),
        ("finetune.enabled", f.enabled.to_string()),
        ("finetune.ema_decay", format!("{:?}", f.ema_decay)),
        ("finetune.period", f.period.to_string()),
        ("finetune.threshold", format!("{:?}", f.threshold)),
        ("finetune.top_fraction", format!("{:?}", f.top_fraction)),
        ("finetune.mix_ratio", format!("{:?}", f.mix_ratio)),
        ("finetune.samples_per_caption", f.samples_per_caption.to_string()),
        ("finetune.capacity", f.capacity.to_string()),
        ("data.n", cfg.data.n.to_string()),
        ("data.text_len", cfg.data.text_len.to_string()),
        ("metrics.extractor_seed", cfg.metrics.extractor_seed.to_string()),
        ("metrics.feature_dim", cfg.metrics.feature_dim.to_string()),
        ("metrics.n_gen", cfg.metrics.n_gen.to_string()),
        ("metrics.use_ema", cfg.metrics.use_ema.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}")).collect()
}

/// Splits `key = value`, ignoring blank lines and `#` comments.
pub(crate) fn split_line(raw: &str) -> Option<std::result::Result<(&str, &str), String>> {
    let line = raw.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(format!("expected `section.key = value`, got {line:?}")),
    })
}

/// Parses a config document; keys not given keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| Error::Config { line, msg };
        let Some(kv) = split_line(raw) else { continue };
        let (key, value) = kv.map_err(err)?;
        if !seen.insert(key.to_string()) {
            return Err(err(format!("key {key} given twice")));
        }
        if key == "model.embeddings" {
            run.embeddings = Some(PathBuf::from(value));
            continue;
        }
        match apply_key(&mut run.train, key, value) {
            Ok(true) => {}
            Ok(false) => return Err(err(format!("unknown key {key}"))),
            Err(msg) => return Err(err(format!("{key}: {msg}"))),
        }
    }
    run.train.validate()?;
    Ok(run)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn to_text(run: &RunConfig) -> String {
    let mut lines = config_lines(&run.train);
    if let Some(p) = &run.embeddings {
        lines.push(format!("model.embeddings = {}", p.display()));
    }
    lines.join("\n") + "\n"
}
