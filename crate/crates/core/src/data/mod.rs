//! Sequences, sliding windows, leakage-free splits, and the synthetic
//! pattern-sequence generator.

pub mod io;
mod synthetic;

pub use synthetic::{generate, CoeffDynamics, SyntheticDataset, SyntheticSpec};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// One multivariate sequence of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Vec<f64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.frames.first().map(Vec::len)
    }
}

/// A `(history, horizon)` pair cut from one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceWindow {
    pub history: Vec<Vec<f64>>,
    pub horizon: Vec<Vec<f64>>,
    /// Index of the source sequence.
    pub source_id: usize,
    /// Start index of the history within the source.
    pub offset: usize,
}

impl SequenceWindow {
    pub fn new(history: Vec<Vec<f64>>, horizon: Vec<Vec<f64>>, source_id: usize, offset: usize) -> Result<Self> {
        if history.is_empty() || horizon.is_empty() {
            return Err(invalid("windows need T >= 1 and H >= 1"));
        }
        let d = history[0].len();
        if history.iter().chain(&horizon).any(|f| f.len() != d) {
            return Err(shape_err("all frames of a window must share one dimension"));
        }
        if history.iter().chain(&horizon).flatten().any(|v| !v.is_finite()) {
            return Err(invalid("window contains non-finite values"));
        }
        Ok(Self { history, horizon, source_id, offset })
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon.len()
    }

    pub fn dim(&self) -> usize {
        self.history[0].len()
    }

    /// Most recent history frame.
    pub fn last_history_frame(&self) -> &[f64] {
        self.history.last().unwrap()
    }
}

/// All windows of history length `t` and horizon `h` at the given stride.
pub fn sliding_windows(sequences: &[Sequence], t: usize, h: usize, stride: usize) -> Result<Vec<SequenceWindow>> {
    if t == 0 || h == 0 || stride == 0 {
        return Err(invalid(format!("need T, H, stride >= 1, got {t}, {h}, {stride}")));
    }
    let mut out = Vec::new();
    for (id, seq) in sequences.iter().enumerate() {
        if seq.len() < t + h {
            continue;
        }
        let mut start = 0;
        while start + t + h <= seq.len() {
            out.push(SequenceWindow::new(
                seq.frames[start..start + t].to_vec(),
                seq.frames[start + t..start + t + h].to_vec(),
                id,
                start,
            )?);
            start += stride;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Assignment of source sequences to splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

impl SequenceSplit {
    pub fn role(&self, source_id: usize) -> Option<SplitRole> {
        if self.train.contains(&source_id) {
            Some(SplitRole::Train)
        } else if self.val.contains(&source_id) {
            Some(SplitRole::Val)
        } else if self.test.contains(&source_id) {
            Some(SplitRole::Test)
        } else {
            None
        }
    }
}

/// Shuffles the given source ids with `seed` and cuts them by `ratios`.
pub fn split_sources(sources: &[usize], ratios: SplitRatios, seed: u64) -> Result<SequenceSplit> {
    let total = ratios.train + ratios.val + ratios.test;
    if [ratios.train, ratios.val, ratios.test].iter().any(|r| !(0.0..=1.0).contains(r)) || (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut ids: Vec<usize> = sources.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    let mut warnings = Vec::new();
    if n == 0 {
        return Err(invalid("nothing to split"));
    }
    if n == 1 {
        let msg = "only one sequence available; it is assigned to the training split".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        return Ok(SequenceSplit { train: ids, val: vec![], test: vec![], warnings });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (((n as f64) * ratios.train).round() as usize).min(n);
    let n_val = (((n as f64) * ratios.val).round() as usize).min(n - n_train);
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    if val.is_empty() || test.is_empty() {
        let msg = format!("{n} sequences leave an empty validation or test split");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(SequenceSplit { train, val, test, warnings })
}

/// Windows partitioned by the split of their source sequence.
#[derive(Debug, Clone, Default)]
pub struct WindowSplit {
    pub train: Vec<SequenceWindow>,
    pub val: Vec<SequenceWindow>,
    pub test: Vec<SequenceWindow>,
    pub assignment: Option<SequenceSplit>,
}

/// Splits windows at the sequence level so no source contributes to two splits.
pub fn split(windows: Vec<SequenceWindow>, ratios: SplitRatios, seed: u64) -> Result<WindowSplit> {
    let sources: Vec<usize> = windows.iter().map(|w| w.source_id).collect();
    let assignment = split_sources(&sources, ratios, seed)?;
    Ok(apply_split(windows, assignment))
}

pub fn apply_split(windows: Vec<SequenceWindow>, assignment: SequenceSplit) -> WindowSplit {
    let mut out = WindowSplit::default();
    for w in windows {
        match assignment.role(w.source_id) {
            Some(SplitRole::Train) => out.train.push(w),
            Some(SplitRole::Val) => out.val.push(w),
            Some(SplitRole::Test) => out.test.push(w),
            None => {}
        }
    }
    out.assignment = Some(assignment);
    out
}

/// Per-dimension affine map of training data onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for f in frames {
            if min.is_empty() {
                min = f.to_vec();
                max = f.to_vec();
                continue;
            }
            if f.len() != min.len() {
                return Err(shape_err("frames of different dimension"));
            }
            for i in 0..f.len() {
                min[i] = min[i].min(f[i]);
                max[i] = max[i].max(f[i]);
            }
        }
        if min.is_empty() {
            return Err(invalid("cannot fit a normalizer without frames"));
        }
        let scale = min.iter().zip(&max).map(|(lo, hi)| if hi > lo { hi - lo } else { 1.0 }).collect();
        Ok(Self { min, scale })
    }

    pub fn identity(d: usize) -> Self {
        Self { min: vec![0.0; d], scale: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, frame: &[f64]) -> Vec<f64> {
        frame.iter().enumerate().map(|(i, v)| (v - self.min[i]) / self.scale[i]).collect()
    }

    pub fn denormalize(&self, frame: &[f64]) -> Vec<f64> {
        frame.iter().enumerate().map(|(i, v)| v * self.scale[i] + self.min[i]).collect()
    }

    /// Normalises a frame-major flattened block of frames.
    pub fn normalize_flat(&self, flat: &[f64]) -> Vec<f64> {
        let d = self.dim();
        flat.iter().enumerate().map(|(k, v)| (v - self.min[k % d]) / self.scale[k % d]).collect()
    }

    pub fn denormalize_flat(&self, flat: &[f64]) -> Vec<f64> {
        let d = self.dim();
        flat.iter().enumerate().map(|(k, v)| v * self.scale[k % d] + self.min[k % d]).collect()
    }
}

/// Concatenates frames into one frame-major vector.
pub fn flatten(frames: &[Vec<f64>]) -> Vec<f64> {
    frames.iter().flatten().copied().collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}
