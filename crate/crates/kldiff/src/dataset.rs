//! Dataset and result CSV files.
//!
//! A dataset file stores scene attributes only, one scene per row under the
//! header `shape,color,position,size`; images are re-rendered on load.

use std::fs;
use std::path::Path;

use kldiff_core::metrics::MetricReport;
use kldiff_core::scene::{Color, Example, Position, SceneSpec, Shape, SIZE_RADII};
use kldiff_core::trainer::EpochRecord;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const DATASET_HEADER: &str = "shape,color,position,size";
pub const ABLATION_HEADER: &str = "mode,fid,is,alignment";

pub fn dataset_csv(examples: &[Example]) -> String {
    let mut out = String::from(DATASET_HEADER);
    out.push('\n');
    for e in examples {
        let s = &e.spec;
        out.push_str(&format!("{},{},{},{}\n", s.shape.word(), s.color.word(), s.position.word(), s.size));
    }
    out
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<Example>> {
    let err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DATASET_HEADER => {}
        _ => return Err(err(1, format!("expected header {DATASET_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(err(line, format!("expected 4 fields, found {}", f.len())));
        }
        let shape = Shape::ALL.into_iter().find(|s| s.word() == f[0]);
        let color = Color::ALL.into_iter().find(|c| c.word() == f[1]);
        let position = Position::ALL.into_iter().find(|p| p.word() == f[2]);
        let size = f[3].parse::<usize>().ok().filter(|&s| s < SIZE_RADII.len());
        match (shape, color, position, size) {
            (Some(shape), Some(color), Some(position), Some(size)) => out.push(Example::from_spec(SceneSpec {
                shape,
                color,
                position,
                size,
            })),
            _ => return Err(err(line, format!("unknown scene {raw:?}"))),
        }
    }
    if out.is_empty() {
        return Err(err(1, "dataset has no rows".into()));
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    write_atomic(path, dataset_csv(examples).as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn ablation_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{}\n", r.mode, r.fid, r.is, r.alignment));
    }
    out
}
