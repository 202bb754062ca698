//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KLDF"  u32 version  u64 metadata length  metadata (UTF-8 text)
//! u32 array count, then per array:
//!   u32 name length, name, u8 dtype tag (1 = f64), u32 rank, rank × u64 dims,
//!   product(dims) × f64
//! ```
//!
//! The metadata is `key = value` lines: the full training configuration,
//! the vocabulary, counters, the training RNG position and replay-buffer
//! bookkeeping. Arrays hold parameters (`param.*`), the moving average
//! (`ema.*`), optimizer moments (`opt.m.*`, `opt.v.*`), replay images
//! (`buffer.{i}.image`) and the epoch history (`history`, one row per epoch).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use kldiff_core::conditioning::Vocabulary;
use kldiff_core::params::ParamSet;
use kldiff_core::tensor::{ImageShape, ImageTensor, Matrix};
use kldiff_core::trainer::{Checkpoint, EpochRecord, ReplayBuffer, ReplayEntry, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{apply_key, config_lines, split_line};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 4] = b"KLDF";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const HISTORY_COLS: usize = 7;

struct Array {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn metadata(ckpt: &Checkpoint) -> String {
    let s = &ckpt.state;
    let mut lines = config_lines(&ckpt.config);
    lines.push(format!("vocab.tokens = {}", ckpt.vocab.tokens().join(" ")));
    lines.push(format!("state.epoch = {}", s.epoch));
    lines.push(format!("state.optimizer_step = {}", s.optimizer.step));
    let seed: String = s.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    lines.push(format!("rng.seed = {seed}"));
    lines.push(format!("rng.stream = {}", s.rng.get_stream()));
    lines.push(format!("rng.word_pos = {}", s.rng.get_word_pos()));
    lines.push(format!("buffer.len = {}", s.buffer.len()));
    for (i, e) in s.buffer.iter().enumerate() {
        lines.push(format!("buffer.{i}.caption = {}", e.caption));
        lines.push(format!("buffer.{i}.score = {:?}", e.score));
        lines.push(format!("buffer.{i}.epoch = {}", e.epoch));
    }
    lines.push(format!("history.len = {}", s.history.len()));
    lines.join("\n") + "\n"
}

fn arrays(ckpt: &Checkpoint) -> Vec<(String, Array)> {
    let s = &ckpt.state;
    let mat = |m: &Matrix| Array {
        dims: vec![m.rows, m.cols],
        values: m.data.clone(),
    };
    let mut out = Vec::new();
    let names: Vec<String> = s.params.named_matrices().into_iter().map(|(n, _)| n).collect();
    for (n, m) in s.params.named_matrices() {
        out.push((format!("param.{n}"), mat(m)));
    }
    for (n, m) in s.ema.shadow.named_matrices() {
        out.push((format!("ema.{n}"), mat(m)));
    }
    for (prefix, moments) in [("opt.m", &s.optimizer.m), ("opt.v", &s.optimizer.v)] {
        for (n, v) in names.iter().zip(moments) {
            out.push((
                format!("{prefix}.{n}"),
                Array {
                    dims: vec![v.len()],
                    values: v.clone(),
                },
            ));
        }
    }
    for (i, e) in s.buffer.iter().enumerate() {
        let sh = e.image.shape;
        out.push((
            format!("buffer.{i}.image"),
            Array {
                dims: vec![sh.channels, sh.height, sh.width],
                values: e.image.data.clone(),
            },
        ));
    }
    let mut hist = Vec::with_capacity(s.history.len() * HISTORY_COLS);
    for r in &s.history {
        hist.extend([
            r.epoch as f64,
            r.mean_loss,
            r.per_t_q1,
            r.per_t_median,
            r.per_t_q3,
            r.gate,
            r.buffer_len as f64,
        ]);
    }
    out.push((
        "history".into(),
        Array {
            dims: vec![s.history.len(), HISTORY_COLS],
            values: hist,
        },
    ));
    out
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = metadata(ckpt);
    let arrays = arrays(ckpt);
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    b.extend_from_slice(meta.as_bytes());
    b.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in &arrays {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(DTYPE_F64);
        b.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for &d in &a.dims {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

/// Writes to a temporary sibling and renames it over `path`, so readers
/// never observe a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &to_bytes(ckpt))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> std::result::Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{what} {v} too large")))
    }
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

fn read_arrays(r: &mut Reader) -> std::result::Result<BTreeMap<String, Array>, CheckpointError> {
    let count = r.u32("array count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("array name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "array name")?)
            .map_err(|_| malformed("array name is not UTF-8"))?
            .to_string();
        let tag = r.u8(&name)?;
        if tag != DTYPE_F64 {
            return Err(malformed(format!("array {name} has unknown dtype tag {tag}")));
        }
        let rank = r.u32(&name)? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.len(&name)?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| malformed(format!("array {name} is too large")))?;
        let raw = r.take(count * 8, &name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Array { dims, values }).is_some() {
            return Err(malformed(format!("array {name} appears twice")));
        }
    }
    if r.pos != r.bytes.len() {
        return Err(malformed("trailing bytes after the last array"));
    }
    Ok(out)
}

struct Meta {
    config: TrainConfig,
    fields: BTreeMap<String, String>,
}

impl Meta {
    fn parse(text: &str) -> std::result::Result<Self, CheckpointError> {
        let mut config = TrainConfig::default();
        let mut fields = BTreeMap::new();
        for raw in text.lines() {
            let Some(kv) = split_line(raw) else { continue };
            let (k, v) = kv.map_err(malformed)?;
            match apply_key(&mut config, k, v) {
                Ok(true) => {}
                Ok(false) => {
                    if fields.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(malformed(format!("metadata key {k} repeated")));
                    }
                }
                Err(msg) => return Err(malformed(format!("{k}: {msg}"))),
            }
        }
        Ok(Self { config, fields })
    }

    fn get(&self, key: &str) -> std::result::Result<&str, CheckpointError> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| malformed(format!("metadata key {key} missing")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<T, CheckpointError> {
        let v = self.get(key)?;
        v.parse().map_err(|_| malformed(format!("metadata {key} = {v:?} does not parse")))
    }
}

fn parse_seed(hex: &str) -> std::result::Result<[u8; 32], CheckpointError> {
    let bad = || malformed("rng.seed must be 64 hex digits");
    if hex.len() != 64 || !hex.is_ascii() {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(seed)
}

fn take_array(
    arrays: &mut BTreeMap<String, Array>,
    name: &str,
    dims: &[usize],
) -> std::result::Result<Vec<f64>, CheckpointError> {
    let a = arrays
        .remove(name)
        .ok_or_else(|| malformed(format!("array {name} missing")))?;
    if a.dims != dims {
        return Err(malformed(format!(
            "array {name} has dims {:?}, expected {dims:?}",
            a.dims
        )));
    }
    Ok(a.values)
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
        return Err(CheckpointError::Truncated("magic".into()));
    }
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = r.len("metadata length")?;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?).map_err(|_| malformed("metadata is not UTF-8"))?;
    let meta = Meta::parse(text)?;
    let mut arrays = read_arrays(&mut r)?;

    let tokens: Vec<String> = meta.get("vocab.tokens")?.split(' ').map(String::from).collect();
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| malformed(e.to_string()))?;
    // a fresh initialization supplies every shape; the stored arrays overwrite it
    let mut ckpt = Checkpoint::init(meta.config, vocab).map_err(|e| malformed(e.to_string()))?;
    let st = &mut ckpt.state;
    st.epoch = meta.num("state.epoch")?;
    st.optimizer.step = meta.num("state.optimizer_step")?;

    let names: Vec<String> = st.params.names();
    for (prefix, target) in [("param", &mut st.params), ("ema", &mut st.ema.shadow)] {
        for (name, m) in names.iter().zip(target.matrices_mut()) {
            m.data = take_array(&mut arrays, &format!("{prefix}.{name}"), &[m.rows, m.cols])?;
        }
    }
    let opt = &mut st.optimizer;
    for (prefix, moments) in [("opt.m", &mut opt.m), ("opt.v", &mut opt.v)] {
        for (name, v) in names.iter().zip(moments.iter_mut()) {
            *v = take_array(&mut arrays, &format!("{prefix}.{name}"), &[v.len()])?;
        }
    }

    let cfg = ckpt.config;
    let shape: ImageShape = cfg.model.image;
    let mut buffer = ReplayBuffer::new(cfg.finetune.capacity, cfg.finetune.threshold);
    let buffer_len: usize = meta.num("buffer.len")?;
    if buffer_len > cfg.finetune.capacity {
        return Err(malformed("replay buffer longer than its capacity"));
    }
    for i in 0..buffer_len {
        let data = take_array(
            &mut arrays,
            &format!("buffer.{i}.image"),
            &[shape.channels, shape.height, shape.width],
        )?;
        let image = ImageTensor::from_vec(shape, data).map_err(|e| malformed(e.to_string()))?;
        let entry = ReplayEntry {
            image,
            caption: meta.get(&format!("buffer.{i}.caption"))?.to_string(),
            score: meta.num(&format!("buffer.{i}.score"))?,
            epoch: meta.num(&format!("buffer.{i}.epoch"))?,
        };
        buffer.push(entry).map_err(|e| malformed(e.to_string()))?;
    }
    ckpt.state.buffer = buffer;

    let history_len: usize = meta.num("history.len")?;
    let hist = take_array(&mut arrays, "history", &[history_len, HISTORY_COLS])?;
    ckpt.state.history = hist
        .chunks_exact(HISTORY_COLS)
        .map(|r| EpochRecord {
            epoch: r[0] as usize,
            mean_loss: r[1],
            per_t_q1: r[2],
            per_t_median: r[3],
            per_t_q3: r[4],
            gate: r[5],
            buffer_len: r[6] as usize,
        })
        .collect();

    let mut rng = ChaCha8Rng::from_seed(parse_seed(meta.get("rng.seed")?)?);
    rng.set_stream(meta.num("rng.stream")?);
    rng.set_word_pos(meta.num("rng.word_pos")?);
    ckpt.state.rng = rng;

    if let Some(name) = arrays.keys().next() {
        return Err(malformed(format!("unexpected array {name}")));
    }
    Ok(ckpt)
}
