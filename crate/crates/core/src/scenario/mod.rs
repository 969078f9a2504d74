//! Dataset ingestion, synthetic data, SSL splits, noise and the task loop.

mod features;
mod manifest;
mod noise;
mod runner;
mod split;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineError;
use crate::format::FormatError;
use crate::ilfr::{IlfrError, LayerFeatures};
use crate::ssl::SslError;

pub use features::{read_features, write_binary_features, write_text_features, FeatureFormat};
pub use manifest::{load_manifest, save_dataset, DatasetManifest, DomainEntry, TaskEntry};
pub use noise::inject_noise;
pub use runner::{
    run_scenario, run_scenario_with, search_threshold, IlfrSpec, NoiseSpec, NoiseTarget,
    ScenarioOutcome, ScenarioSpec, StreamEvent, StreamKind, TaskCheckpoint, TestItem,
    ThresholdOverride,
};
pub use split::{holdout_validation, split_ssl, Role, SslProtocol};
pub use synthetic::{generate_synthetic, LayerSpec, SyntheticDomainSpec, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

/// Where a sample was read from: file index within its domain entry and the
/// record offset (data row for text files, byte offset for binary files).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSource {
    pub file: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub domain: u16,
    pub task: u32,
    pub class: u32,
    pub object: u32,
    pub split: Split,
    pub features: LayerFeatures,
    pub source: SampleSource,
}

/// A manifest together with every sample it indexes, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Sample indices of one domain, split and class, in dataset order.
    pub fn indices(&self, domain: u16, split: Split, class: u32) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain && s.split == split && s.class == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, domain: u16, split: Split) -> usize {
        self.samples
            .iter()
            .filter(|s| s.domain == domain && s.split == split)
            .count()
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: file not found", path.display())]
    MissingFile { path: PathBuf },
    #[error("{}: {message}", path.display())]
    ManifestParse { path: PathBuf, message: String },
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("{location}: layer {layer} has dimension {found}, manifest declares {expected}")]
    DimMismatch {
        location: String,
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("class {class} appears in task {first} and task {second}")]
    ClassInTwoTasks { class: u32, first: u32, second: u32 },
    #[error("manifest declares no tasks")]
    NoTasks,
    #[error("manifest declares no domains")]
    NoDomains,
    #[error("{location}: class {class} does not belong to task {task}")]
    ClassNotInTask {
        location: String,
        class: u32,
        task: u32,
    },
    #[error(
        "{location}: sample belongs to domain {found}, file is listed under domain {expected}"
    )]
    WrongDomain {
        location: String,
        expected: u16,
        found: u16,
    },
    #[error("unseen_objects needs at least two objects per class; domain {domain} class {class} has {found}")]
    TooFewObjects {
        domain: u16,
        class: u32,
        found: usize,
    },
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("domain {domain}, task {task}: {source}")]
    Task {
        domain: u16,
        task: u32,
        #[source]
        source: Box<ScenarioError>,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ilfr(#[from] IlfrError),
    #[error(transparent)]
    Ssl(#[from] SslError),
}

/// Coarse error classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Integrity,
    Numerical,
}

impl ScenarioError {
    pub fn class(&self) -> ErrorClass {
        match self {
            ScenarioError::Io { .. }
            | ScenarioError::MissingFile { .. }
            | ScenarioError::ManifestParse { .. }
            | ScenarioError::NoTasks
            | ScenarioError::NoDomains
            | ScenarioError::TooFewObjects { .. }
            | ScenarioError::InvalidSpec(_) => ErrorClass::Usage,
            ScenarioError::Parse { .. }
            | ScenarioError::DimMismatch { .. }
            | ScenarioError::ClassInTwoTasks { .. }
            | ScenarioError::ClassNotInTask { .. }
            | ScenarioError::WrongDomain { .. }
            | ScenarioError::Format(_) => ErrorClass::Integrity,
            ScenarioError::Task { source, .. } => source.class(),
            ScenarioError::Engine(e) => engine_class(e),
            ScenarioError::Ilfr(IlfrError::Linalg(_)) => ErrorClass::Numerical,
            ScenarioError::Ilfr(_) => ErrorClass::Usage,
            ScenarioError::Ssl(SslError::Engine(e)) => engine_class(e),
            ScenarioError::Ssl(SslError::Linalg(_)) => ErrorClass::Numerical,
            ScenarioError::Ssl(_) => ErrorClass::Usage,
        }
    }
}

fn engine_class(e: &EngineError) -> ErrorClass {
    match e {
        EngineError::Numeric { .. } | EngineError::Singular { .. } | EngineError::Input(_) => {
            ErrorClass::Numerical
        }
        EngineError::DimensionMismatch { .. } => ErrorClass::Integrity,
        _ => ErrorClass::Usage,
    }
}

/// SplitMix64 finalizer folded over `parts`; gives independent, stable
/// sub-seeds for each (purpose, domain, class, ...) tuple.
pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, p| mix(acc ^ mix(*p)))
}
