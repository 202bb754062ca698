//! Bounded store of high-confidence generated samples.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub image: ImageTensor,
    pub caption: String,
    pub score: f64,
    /// Epoch count at admission.
    pub epoch: usize,
}

/// FIFO buffer: admission requires `score ≥ threshold`; when full, the
/// oldest entry is evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub threshold: f64,
    entries: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, threshold: f64) -> Self {
        Self {
            capacity,
            threshold,
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&ReplayEntry> {
        self.entries.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    /// Rejects entries scoring below the threshold.
    pub fn push(&mut self, entry: ReplayEntry) -> Result<()> {
        if !(entry.score >= self.threshold) {
            return Err(Error::InvalidInput(format!(
                "score {} below admission threshold {}",
                entry.score, self.threshold
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }
}

/// Indices of the samples to keep: those scoring at least `tau`, cut to the
/// top `ceil(q·passing)` by score. Ties keep the lower index; the result is
/// in ascending index order.
pub fn select_high_confidence(scores: &[f64], tau: f64, q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidInput(format!("selection fraction {q} outside (0, 1]")));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("confidence {s} outside [0, 1]")));
    }
    let mut passing: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= tau).collect();
    passing.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let keep = libm::ceil(q * passing.len() as f64) as usize;
    passing.truncate(keep);
    passing.sort_unstable();
    Ok(passing)
}
