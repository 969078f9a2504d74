//! Keyed store of per-(domain, class) prototypes and the classifier built
//! from it.
//!
//! The store is single-writer: `observe_batch` takes `&mut self`. Every
//! mutation bumps a generation counter, and a [`PreparedClassifier`] remembers
//! the generation it was built from so staleness can be checked explicitly.

mod classify;
mod persist;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, MomentPack};

pub use classify::{softmax_neg, Prediction, PreparedClass, PreparedClassifier};
pub use persist::{encoded_len, load_store, load_store_with, save_store, PersistError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassKey {
    pub domain: u16,
    pub class: u32,
}

impl ClassKey {
    pub fn new(domain: u16, class: u32) -> Self {
        Self { domain, class }
    }
}

impl std::fmt::Display for ClassKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(domain {}, class {})", self.domain, self.class)
    }
}

/// How a new batch is folded into an existing prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Exact pooled moments; streaming equals a single offline pass.
    #[default]
    CountWeighted,
    /// Old and new mean/covariance are averaged with weight 1/2 each.
    #[serde(alias = "paper_equal_weight")]
    EqualWeight,
}

impl std::str::FromStr for MergeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count_weighted" => Ok(Self::CountWeighted),
            "equal_weight" | "paper_equal_weight" => Ok(Self::EqualWeight),
            other => Err(format!(
                "unknown merge mode `{other}` (expected count_weighted or equal_weight)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub epsilon: f64,
    pub merge_mode: MergeMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 1.0,
            epsilon: 1e-8,
            merge_mode: MergeMode::CountWeighted,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.gamma1) || !ok(self.gamma2) {
            return Err(EngineError::InvalidConfig(format!(
                "shrinkage gammas must be finite and non-negative (got {}, {})",
                self.gamma1, self.gamma2
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(EngineError::InvalidConfig(format!(
                "epsilon must be positive (got {})",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("{key}: {source}")]
    Numeric {
        key: ClassKey,
        #[source]
        source: LinalgError,
    },
    #[error("domain {domain} has dimension {expected}, batch has {found}")]
    DimensionMismatch {
        domain: u16,
        expected: usize,
        found: usize,
    },
    #[error("{key} is singular even after shrinkage and normalization: {source}")]
    Singular {
        key: ClassKey,
        #[source]
        source: LinalgError,
    },
    #[error("store is empty; nothing to prepare")]
    EmptyStore,
    #[error("unknown domain {0}")]
    UnknownDomain(u16),
    #[error("unknown class {class} in domain {domain}")]
    UnknownClass { domain: u16, class: u32 },
    #[error("domains disagree on their class sets: domain {left} has {left_classes:?}, domain {right} has {right_classes:?}")]
    Misaligned {
        left: u16,
        left_classes: Vec<u32>,
        right: u16,
        right_classes: Vec<u32>,
    },
    #[error("no domain inputs given")]
    NoInputs,
    #[error(
        "prepared classifier is stale (built at generation {prepared}, store is at {current})"
    )]
    Stale { prepared: u64, current: u64 },
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Input(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub key: ClassKey,
    pub moments: MomentPack,
    pub first_seen_task: u32,
}

/// What `observe_batch` did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observed {
    Inserted,
    Merged,
    /// Empty batch; the store was left untouched.
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    prototypes: BTreeMap<ClassKey, Prototype>,
    domain_dims: BTreeMap<u16, usize>,
    config: EngineConfig,
    generation: u64,
}

impl Default for PrototypeStore {
    fn default() -> Self {
        Self::new(EngineConfig::default())
    }
}

impl PrototypeStore {
    pub fn new(config: EngineConfig) -> Self {
        Self {
            prototypes: BTreeMap::new(),
            domain_dims: BTreeMap::new(),
            config,
            generation: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Replaces the preparation parameters. Raw moments are untouched, but
    /// any prepared classifier becomes stale.
    pub fn set_config(&mut self, config: EngineConfig) {
        self.config = config;
        self.generation += 1;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, key: &ClassKey) -> Option<&Prototype> {
        self.prototypes.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.prototypes.values()
    }

    pub fn domain_dim(&self, domain: u16) -> Option<usize> {
        self.domain_dims.get(&domain).copied()
    }

    pub fn domains(&self) -> impl Iterator<Item = (u16, usize)> + '_ {
        self.domain_dims.iter().map(|(d, n)| (*d, *n))
    }

    pub fn classes(&self, domain: u16) -> Vec<u32> {
        self.prototypes
            .range(ClassKey::new(domain, 0)..=ClassKey::new(domain, u32::MAX))
            .map(|(k, _)| k.class)
            .collect()
    }

    /// Fixes the feature dimension of a domain before any data arrives.
    pub fn register_domain(&mut self, domain: u16, dim: usize) -> Result<(), EngineError> {
        match self.domain_dims.get(&domain) {
            Some(&existing) if existing != dim => Err(EngineError::DimensionMismatch {
                domain,
                expected: existing,
                found: dim,
            }),
            _ => {
                self.domain_dims.insert(domain, dim);
                Ok(())
            }
        }
    }

    /// Folds one batch of samples of a single class into its prototype.
    pub fn observe_batch<V: AsRef<[f64]>>(
        &mut self,
        key: ClassKey,
        task: u32,
        batch: &[V],
    ) -> Result<Observed, EngineError> {
        if batch.is_empty() {
            log::warn!("empty batch for {key}; ignored");
            return Ok(Observed::EmptyBatch);
        }
        let dim = batch[0].as_ref().len();
        if let Some(&expected) = self.domain_dims.get(&key.domain) {
            if let Some(bad) = batch.iter().find(|v| v.as_ref().len() != expected) {
                return Err(EngineError::DimensionMismatch {
                    domain: key.domain,
                    expected,
                    found: bad.as_ref().len(),
                });
            }
        }
        let fresh = linalg::batch_moments(batch).map_err(|source| match source {
            LinalgError::DimensionMismatch { expected, found } => EngineError::DimensionMismatch {
                domain: key.domain,
                expected,
                found,
            },
            source => EngineError::Numeric { key, source },
        })?;
        self.domain_dims.entry(key.domain).or_insert(dim);

        let outcome = match self.prototypes.get_mut(&key) {
            Some(existing) => {
                let merged = match self.config.merge_mode {
                    MergeMode::CountWeighted => linalg::merge_moments(&existing.moments, &fresh),
                    MergeMode::EqualWeight => {
                        linalg::merge_moments_equal_weight(&existing.moments, &fresh)
                    }
                }
                .map_err(|source| EngineError::Numeric { key, source })?;
                existing.moments = merged;
                Observed::Merged
            }
            None => {
                self.prototypes.insert(
                    key,
                    Prototype {
                        key,
                        moments: fresh,
                        first_seen_task: task,
                    },
                );
                Observed::Inserted
            }
        };
        self.generation += 1;
        Ok(outcome)
    }

    /// Inserts or replaces a prototype wholesale (used by persistence).
    pub(crate) fn insert_prototype(&mut self, proto: Prototype) -> Result<(), EngineError> {
        self.register_domain(proto.key.domain, proto.moments.dim())?;
        self.prototypes.insert(proto.key, proto);
        self.generation += 1;
        Ok(())
    }

    /// Shrinks, normalizes and inverts every prototype covariance.
    pub fn prepare(&self) -> Result<PreparedClassifier, EngineError> {
        PreparedClassifier::build(self)
    }

    pub fn ensure_fresh(&self, prepared: &PreparedClassifier) -> Result<(), EngineError> {
        if prepared.generation() == self.generation {
            Ok(())
        } else {
            Err(EngineError::Stale {
                prepared: prepared.generation(),
                current: self.generation,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_encounter_inserts() {
        let mut store = PrototypeStore::default();
        let batch: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 1.0]).collect();
        let out = store.observe_batch(ClassKey::new(0, 3), 0, &batch).unwrap();
        assert_eq!(out, Observed::Inserted);
        assert_eq!(store.len(), 1);
        assert_eq!(store.get(&ClassKey::new(0, 3)).unwrap().moments.count(), 8);
        assert_eq!(store.domain_dim(0), Some(2));
    }

    #[test]
    fn count_weighted_streaming_matches_single_batch() {
        let mut store = PrototypeStore::default();
        let key = ClassKey::new(0, 0);
        store.observe_batch(key, 0, &[[0.0], [2.0]]).unwrap();
        assert_eq!(
            store.observe_batch(key, 0, &[[4.0], [6.0]]).unwrap(),
            Observed::Merged
        );
        let cov = store.get(&key).unwrap().moments.covariance();
        assert_relative_eq!(cov.get(0, 0), 20.0 / 3.0, epsilon = 1e-12);

        let mut single = PrototypeStore::default();
        single
            .observe_batch(key, 0, &[[0.0], [2.0], [4.0], [6.0]])
            .unwrap();
        let oracle = single.get(&key).unwrap().moments.covariance();
        assert_relative_eq!(cov.get(0, 0), oracle.get(0, 0), epsilon = 1e-12);
    }

    #[test]
    fn equal_weight_mode() {
        let mut store = PrototypeStore::new(EngineConfig {
            merge_mode: MergeMode::EqualWeight,
            ..EngineConfig::default()
        });
        let key = ClassKey::new(1, 0);
        store.observe_batch(key, 0, &[[0.0], [2.0]]).unwrap();
        store.observe_batch(key, 0, &[[4.0], [6.0]]).unwrap();
        let m = &store.get(&key).unwrap().moments;
        assert_eq!(m.mean(), &[3.0]);
        assert_relative_eq!(m.covariance().get(0, 0), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut store = PrototypeStore::default();
        let empty: [[f64; 2]; 0] = [];
        let generation = store.generation();
        assert_eq!(
            store.observe_batch(ClassKey::new(0, 0), 0, &empty).unwrap(),
            Observed::EmptyBatch
        );
        assert!(store.is_empty());
        assert_eq!(store.generation(), generation);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut store = PrototypeStore::default();
        store
            .observe_batch(ClassKey::new(0, 0), 0, &[[1.0, 2.0]])
            .unwrap();
        let err = store
            .observe_batch(ClassKey::new(0, 1), 0, &[[1.0, 2.0, 3.0]])
            .unwrap_err();
        assert_eq!(
            err,
            EngineError::DimensionMismatch {
                domain: 0,
                expected: 2,
                found: 3
            }
        );
        // Other domains have their own dimension.
        store
            .observe_batch(ClassKey::new(1, 0), 0, &[[1.0, 2.0, 3.0]])
            .unwrap();
    }

    #[test]
    fn classes_are_per_domain_and_sorted() {
        let mut store = PrototypeStore::default();
        for (d, c) in [(1, 5), (0, 9), (1, 2), (0, 1)] {
            store
                .observe_batch(ClassKey::new(d, c), 0, &[[1.0]])
                .unwrap();
        }
        assert_eq!(store.classes(0), vec![1, 9]);
        assert_eq!(store.classes(1), vec![2, 5]);
        assert!(store.classes(2).is_empty());
    }

    #[test]
    fn merge_mode_parses() {
        assert_eq!(
            "count_weighted".parse::<MergeMode>().unwrap(),
            MergeMode::CountWeighted
        );
        assert_eq!(
            "equal_weight".parse::<MergeMode>().unwrap(),
            MergeMode::EqualWeight
        );
        assert!("mean".parse::<MergeMode>().is_err());
    }
}
