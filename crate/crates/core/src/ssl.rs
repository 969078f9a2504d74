//! Pseudo-labeling of unlabeled samples against a per-task reference buffer.
//!
//! The buffer holds a few randomly chosen labeled representations per class
//! of the current task. An unlabeled sample takes the class of its most
//! cosine-similar reference when that similarity reaches the threshold;
//! otherwise it is dropped. The buffer is emptied at the end of every task.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ClassKey, EngineError, PrototypeStore};
use crate::linalg::{cosine_sim, FVec, LinalgError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SslError {
    #[error("threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("capacity per class must be positive")]
    ZeroCapacity,
    #[error("no candidate thresholds given")]
    NoCandidates,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub capacity_per_class: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 0.9,
            capacity_per_class: 5,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(SslError::InvalidThreshold(self.threshold));
        }
        if self.capacity_per_class == 0 {
            return Err(SslError::ZeroCapacity);
        }
        Ok(())
    }
}

/// Task-scoped store of labeled reference representations.
#[derive(Debug, Clone)]
pub struct ReferenceBuffer {
    task: u32,
    capacity_per_class: usize,
    entries: Vec<(ClassKey, FVec)>,
    rng: ChaCha8Rng,
}

impl ReferenceBuffer {
    pub fn new(task: u32, capacity_per_class: usize, seed: u64) -> Self {
        Self {
            task,
            capacity_per_class,
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn task(&self) -> u32 {
        self.task
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(ClassKey, FVec)] {
        &self.entries
    }

    pub fn count_for(&self, key: ClassKey) -> usize {
        self.entries.iter().filter(|(k, _)| *k == key).count()
    }

    /// Adds uniformly chosen samples of `batch` until `key` reaches capacity.
    /// Zero-norm vectors cannot be compared by angle and are never stored.
    pub fn stock(&mut self, key: ClassKey, batch: &[&FVec]) {
        let room = self.capacity_per_class.saturating_sub(self.count_for(key));
        let usable: Vec<&FVec> = batch
            .iter()
            .copied()
            .filter(|v| v.iter().any(|x| *x != 0.0))
            .collect();
        let take = room.min(usable.len());
        if take == 0 {
            return;
        }
        for i in index::sample(&mut self.rng, usable.len(), take) {
            self.entries.push((key, usable[i].clone()));
        }
    }

    /// Discards every reference. Idempotent.
    pub fn end_task(&mut self) {
        self.entries.clear();
    }

    /// Empties the buffer and rebinds it to a new task.
    pub fn begin_task(&mut self, task: u32) {
        self.entries.clear();
        self.task = task;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub key: ClassKey,
    pub similarity: f64,
}

/// Best-matching reference if its cosine similarity reaches the threshold.
/// Ties keep the earliest reference in buffer order.
pub fn pseudo_label(
    buffer: &ReferenceBuffer,
    x: &[f64],
    cfg: &SslConfig,
) -> Result<Option<PseudoLabel>, SslError> {
    if x.iter().all(|v| *v == 0.0) {
        return Err(LinalgError::DegenerateVector.into());
    }
    let mut best: Option<PseudoLabel> = None;
    for (key, reference) in &buffer.entries {
        let similarity = cosine_sim(reference, x)?;
        if best.is_none_or(|b| similarity > b.similarity) {
            best = Some(PseudoLabel {
                key: *key,
                similarity,
            });
        }
    }
    Ok(best.filter(|b| b.similarity >= cfg.threshold))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SslStats {
    pub matched: usize,
    pub discarded: usize,
    pub similarity_sum: f64,
    /// Matches per class id.
    pub histogram: BTreeMap<u32, usize>,
}

impl SslStats {
    pub fn mean_similarity(&self) -> f64 {
        if self.matched == 0 {
            0.0
        } else {
            self.similarity_sum / self.matched as f64
        }
    }

    pub fn absorb(&mut self, other: &SslStats) {
        self.matched += other.matched;
        self.discarded += other.discarded;
        self.similarity_sum += other.similarity_sum;
        for (c, n) in &other.histogram {
            *self.histogram.entry(*c).or_default() += n;
        }
    }
}

/// Per-sample outcome of an unlabeled batch plus aggregate statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnlabeledOutcome {
    pub assignments: Vec<Option<PseudoLabel>>,
    pub stats: SslStats,
}

/// Pseudo-labels `batch` and folds the matched samples into their
/// prototypes, one `observe_batch` call per class in class order. Zero-norm
/// samples count as discarded.
pub fn apply_unlabeled_batch(
    store: &mut PrototypeStore,
    buffer: &ReferenceBuffer,
    batch: &[&FVec],
    cfg: &SslConfig,
) -> Result<UnlabeledOutcome, SslError> {
    if !cfg.enabled {
        return Ok(UnlabeledOutcome {
            assignments: vec![None; batch.len()],
            stats: SslStats::default(),
        });
    }
    let mut out = UnlabeledOutcome::default();
    let mut groups: BTreeMap<ClassKey, Vec<&[f64]>> = BTreeMap::new();
    for x in batch {
        let label = match pseudo_label(buffer, x, cfg) {
            Ok(label) => label,
            Err(SslError::Linalg(LinalgError::DegenerateVector)) => None,
            Err(e) => return Err(e),
        };
        match label {
            Some(l) => {
                out.stats.matched += 1;
                out.stats.similarity_sum += l.similarity;
                *out.stats.histogram.entry(l.key.class).or_default() += 1;
                groups.entry(l.key).or_default().push(x.as_slice());
            }
            None => out.stats.discarded += 1,
        }
        out.assignments.push(label);
    }
    for (key, samples) in groups {
        store.observe_batch(key, buffer.task(), &samples)?;
    }
    Ok(out)
}

/// Score of one threshold candidate as measured by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Fraction of pseudo-labels that were correct (1.0 when nothing matched).
    pub precision: f64,
    pub matched: usize,
    /// Downstream accuracy used for selection.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub best: f64,
    pub rows: Vec<(f64, CandidateScore)>,
}

/// Evaluates every candidate and keeps the one with the highest downstream
/// accuracy; ties go to the higher (more conservative) threshold. Rows are
/// reported in ascending threshold order.
pub fn grid_search_threshold<E>(
    candidates: &[f64],
    mut evaluate: impl FnMut(f64) -> Result<CandidateScore, E>,
) -> Result<ThresholdSearch, E>
where
    E: From<SslError>,
{
    if candidates.is_empty() {
        return Err(SslError::NoCandidates.into());
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for t in sorted {
        let score = evaluate(t)?;
        if best.is_none_or(|(_, acc)| score.accuracy >= acc) {
            best = Some((t, score.accuracy));
        }
        rows.push((t, score));
    }
    Ok(ThresholdSearch {
        best: best.expect("non-empty").0,
        rows,
    })
}
