//! Precomputed token embeddings: UTF-8 lines `token v1 v2 … vd`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use kldiff_core::conditioning::{Vocabulary, PAD};
use kldiff_core::tensor::Matrix;

use crate::error::{Error, Result};

/// Overwrites rows of `table` with the vectors listed in `text`.
///
/// Tokens outside the vocabulary are ignored. Returns the number of
/// vocabulary tokens (padding excluded) that kept their existing row.
pub fn apply_embeddings(text: &str, path: &Path, vocab: &Vocabulary, table: &mut Matrix) -> Result<usize> {
    let err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut fields = raw.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| err(line, format!("non-numeric or non-finite value for {token:?}")))?;
        if values.len() != table.cols {
            return Err(err(
                line,
                format!("{token:?} has {} values, the embedding dimension is {}", values.len(), table.cols),
            ));
        }
        if !seen.insert(token.to_string()) {
            return Err(err(line, format!("token {token:?} listed twice")));
        }
        match vocab.get(token) {
            Some(PAD) => return Err(err(line, "the padding row is fixed at zero".into())),
            Some(id) => table.row_mut(id).copy_from_slice(&values),
            None => {}
        }
    }
    let covered = vocab.tokens().iter().skip(1).filter(|t| seen.contains(t.as_str())).count();
    Ok(vocab.len() - 1 - covered)
}

pub fn load_external_embeddings(path: &Path, vocab: &Vocabulary, table: &mut Matrix) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_embeddings(&text, path, vocab, table)
}
