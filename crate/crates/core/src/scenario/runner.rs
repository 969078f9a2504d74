//! The task loop: domains in order, tasks in order within each domain.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::split::{split_ssl, Role, SslProtocol};
use super::{derive_seed, holdout_validation, inject_noise, Dataset, ScenarioError, Split};
use crate::engine::{ClassKey, EngineConfig, PreparedClassifier, PrototypeStore};
use crate::ilfr::{build_representation, IlfrConfig, IlfrError};
use crate::linalg::FVec;
use crate::metrics::{
    self, ConfusionRecord, CrossEvaluation, FusedAccuracy, RunReport, SslRecord, TaskAccuracy,
    TaskSlice,
};
use crate::par;
use crate::ssl::{
    apply_unlabeled_batch, grid_search_threshold, CandidateScore, ReferenceBuffer, SslConfig,
    ThresholdSearch,
};

const NOISE_TAG: u64 = 0x401;
const LABELED_TAG: u64 = 0x1ab;
const UNLABELED_TAG: u64 = 0x21ab;
const BUFFER_TAG: u64 = 0xb0f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlfrSpec {
    pub k: usize,
    /// Common length every used layer is pooled to; `None` keeps each
    /// layer's own size.
    pub target_dim: Option<usize>,
    pub normalize: bool,
    pub per_layer_normalize: bool,
}

impl Default for IlfrSpec {
    fn default() -> Self {
        Self {
            k: 2,
            target_dim: None,
            normalize: true,
            per_layer_normalize: false,
        }
    }
}

impl IlfrSpec {
    pub fn config_for(&self, layer_dims: &[usize]) -> Result<IlfrConfig, IlfrError> {
        if self.k == 0 {
            return Err(IlfrError::InvalidConfig("k must be at least 1".into()));
        }
        if layer_dims.len() < self.k {
            return Err(IlfrError::TooFewLayers {
                k: self.k,
                found: layer_dims.len(),
            });
        }
        let target_dims = layer_dims[layer_dims.len() - self.k..]
            .iter()
            .map(|&d| self.target_dim.unwrap_or(d))
            .collect();
        let cfg = IlfrConfig {
            k: self.k,
            target_dims,
            normalize: self.normalize,
            per_layer_normalize: self.per_layer_normalize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    Train,
    #[default]
    Test,
    Both,
}

impl std::str::FromStr for NoiseTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(NoiseTarget::Train),
            "test" => Ok(NoiseTarget::Test),
            "both" => Ok(NoiseTarget::Both),
            other => Err(format!(
                "unknown noise target {other:?} (expected train, test or both)"
            )),
        }
    }
}

impl NoiseTarget {
    fn hits(self, split: Split) -> bool {
        matches!(
            (self, split),
            (NoiseTarget::Both, _)
                | (NoiseTarget::Train, Split::Train)
                | (NoiseTarget::Test, Split::Test)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub domain: u16,
    pub sigma: f64,
    #[serde(default)]
    pub applies_to: NoiseTarget,
}

/// Pseudo-label threshold for one domain, or one task of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdOverride {
    pub domain: u16,
    #[serde(default)]
    pub task: Option<u32>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    /// Domains to train, in order; empty means manifest order.
    pub domain_order: Vec<u16>,
    /// Tasks to train within each domain, in order; empty means manifest order.
    pub task_order: Vec<u32>,
    pub protocol: SslProtocol,
    pub labeled_fraction: f64,
    pub batch_size: usize,
    pub noise: Vec<NoiseSpec>,
    pub engine: EngineConfig,
    pub ilfr: IlfrSpec,
    pub ssl: SslConfig,
    pub thresholds: Vec<ThresholdOverride>,
    /// Also score late fusion when several domains know the seen classes.
    pub evaluate_fused: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            domain_order: Vec::new(),
            task_order: Vec::new(),
            protocol: SslProtocol::None,
            labeled_fraction: 0.7,
            batch_size: 32,
            noise: Vec::new(),
            engine: EngineConfig::default(),
            ilfr: IlfrSpec::default(),
            ssl: SslConfig::default(),
            thresholds: Vec::new(),
            evaluate_fused: true,
        }
    }
}

impl ScenarioSpec {
    fn validate(&self, dataset: &Dataset) -> Result<(Vec<u16>, Vec<u32>), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidSpec(m));
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!(
                "labeled fraction must be in (0, 1], got {}",
                self.labeled_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        self.engine.validate()?;
        self.ssl.validate()?;
        for o in &self.thresholds {
            SslConfig {
                threshold: o.threshold,
                ..self.ssl
            }
            .validate()?;
        }
        let manifest = &dataset.manifest;
        let domains: Vec<u16> = if self.domain_order.is_empty() {
            manifest.domains.iter().map(|d| d.id).collect()
        } else {
            self.domain_order.clone()
        };
        let tasks: Vec<u32> = if self.task_order.is_empty() {
            manifest.tasks.iter().map(|t| t.id).collect()
        } else {
            self.task_order.clone()
        };
        if domains.iter().collect::<BTreeSet<_>>().len() != domains.len() {
            return bad("domain order repeats a domain".into());
        }
        if tasks.iter().collect::<BTreeSet<_>>().len() != tasks.len() {
            return bad("task order repeats a task".into());
        }
        for d in domains.iter().chain(self.noise.iter().map(|n| &n.domain)) {
            if manifest.domain(*d).is_none() {
                return bad(format!("unknown domain {d}"));
            }
        }
        for t in &tasks {
            if manifest.task(*t).is_none() {
                return bad(format!("unknown task {t}"));
            }
        }
        for n in &self.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                return bad(format!("noise sigma must be >= 0, got {}", n.sigma));
            }
        }
        Ok((domains, tasks))
    }

    fn threshold(&self, domain: u16, task: u32) -> f64 {
        let task_level = self
            .thresholds
            .iter()
            .find(|o| o.domain == domain && o.task == Some(task));
        let domain_level = self
            .thresholds
            .iter()
            .find(|o| o.domain == domain && o.task.is_none());
        task_level
            .or(domain_level)
            .map_or(self.ssl.threshold, |o| o.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Labeled,
    Unlabeled,
}

/// One batch as it was presented to the learner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub index: usize,
    pub domain: u16,
    pub task: u32,
    pub kind: StreamKind,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct TestItem<'a> {
    pub sample: usize,
    pub class: u32,
    pub representation: &'a FVec,
}

/// State handed to the observer after each task has been evaluated.
pub struct TaskCheckpoint<'a> {
    pub domain: u16,
    pub task: u32,
    pub position: usize,
    pub store: &'a PrototypeStore,
    pub prepared: &'a PreparedClassifier,
    /// Every test item of the current domain, in dataset order.
    pub test_items: &'a [TestItem<'a>],
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: RunReport,
    pub store: PrototypeStore,
    pub stream: Vec<StreamEvent>,
    pub roles: Vec<Role>,
}

pub fn run_scenario(
    spec: &ScenarioSpec,
    dataset: &Dataset,
) -> Result<ScenarioOutcome, ScenarioError> {
    run_scenario_with(spec, dataset, |_| {})
}

/// Per-sample representations (None for unscheduled domains) and the
/// representation length of each scheduled domain.
type Representations = (Vec<Option<FVec>>, BTreeMap<u16, usize>);

fn representations(
    spec: &ScenarioSpec,
    dataset: &Dataset,
    domains: &[u16],
) -> Result<Representations, ScenarioError> {
    let mut configs = BTreeMap::new();
    for &d in domains {
        let entry = dataset.manifest.domain(d).expect("validated");
        configs.insert(d, spec.ilfr.config_for(&entry.layer_dims)?);
    }
    let indices: Vec<usize> = (0..dataset.samples.len()).collect();
    let reps = par::map(&indices, |&i| -> Result<Option<FVec>, ScenarioError> {
        let s = &dataset.samples[i];
        let Some(cfg) = configs.get(&s.domain) else {
            return Ok(None);
        };
        let sigma = spec
            .noise
            .iter()
            .filter(|n| n.domain == s.domain && n.applies_to.hits(s.split))
            .map(|n| n.sigma * n.sigma)
            .sum::<f64>()
            .sqrt();
        let rep = if sigma > 0.0 {
            let noisy = inject_noise(
                std::slice::from_ref(&s.features),
                sigma,
                derive_seed(spec.seed, &[NOISE_TAG, i as u64]),
            )?;
            build_representation(&noisy[0], cfg)?
        } else {
            build_representation(&s.features, cfg)?
        };
        Ok(Some(rep))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let dims = configs.iter().map(|(d, c)| (*d, c.output_dim())).collect();
    Ok((reps, dims))
}

/// Runs the scenario, calling `observer` after every task's evaluation.
pub fn run_scenario_with(
    spec: &ScenarioSpec,
    dataset: &Dataset,
    mut observer: impl FnMut(&TaskCheckpoint<'_>),
) -> Result<ScenarioOutcome, ScenarioError> {
    let (domains, tasks) = spec.validate(dataset)?;
    let roles = split_ssl(dataset, spec.protocol, spec.labeled_fraction, spec.seed)?;
    let (reps, dims) = representations(spec, dataset, &domains)?;
    let rep = |i: usize| reps[i].as_ref().expect("sample of a scheduled domain");

    // test_index[domain][class] = test sample indices in dataset order
    let mut test_index: BTreeMap<u16, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.split == Split::Test && dims.contains_key(&s.domain) {
            test_index
                .entry(s.domain)
                .or_default()
                .entry(s.class)
                .or_default()
                .push(i);
        }
    }

    let mut store = PrototypeStore::new(spec.engine);
    let mut stream = Vec::new();
    let mut task_accuracies = Vec::new();
    let mut fused = Vec::new();
    let mut cross_domain = Vec::new();
    let mut task_slices = Vec::new();
    let mut confusion = Vec::new();
    let mut ssl_records = Vec::new();

    for &domain in &domains {
        store.register_domain(domain, dims[&domain])?;
        let test_items: Vec<TestItem> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain && s.split == Split::Test)
            .map(|(i, s)| TestItem {
                sample: i,
                class: s.class,
                representation: rep(i),
            })
            .collect();
        let mut seen: Vec<u32> = Vec::new();
        let mut seen_tasks: Vec<u32> = Vec::new();
        for (position, &task) in tasks.iter().enumerate() {
            let wrap = |source: ScenarioError| ScenarioError::Task {
                domain,
                task,
                source: Box::new(source),
            };
            let classes = &dataset.manifest.task(task).expect("validated").classes;
            let pick = |role: Role| -> Vec<usize> {
                dataset
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(i, s)| s.domain == domain && s.task == task && roles[*i] == role)
                    .map(|(i, _)| i)
                    .collect()
            };

            // Labeled stream: update prototypes and stock the reference buffer.
            let mut buffer = ReferenceBuffer::new(
                task,
                spec.ssl.capacity_per_class,
                derive_seed(spec.seed, &[BUFFER_TAG, domain as u64, task as u64]),
            );
            let mut labeled = pick(Role::Labeled);
            labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                &[LABELED_TAG, domain as u64, task as u64],
            )));
            for chunk in labeled.chunks(spec.batch_size) {
                stream.push(StreamEvent {
                    index: stream.len(),
                    domain,
                    task,
                    kind: StreamKind::Labeled,
                    samples: chunk.to_vec(),
                });
                let mut groups: BTreeMap<u32, Vec<&FVec>> = BTreeMap::new();
                for &i in chunk {
                    groups
                        .entry(dataset.samples[i].class)
                        .or_default()
                        .push(rep(i));
                }
                for (class, group) in groups {
                    let key = ClassKey::new(domain, class);
                    store
                        .observe_batch(key, task, &group)
                        .map_err(|e| wrap(e.into()))?;
                    buffer.stock(key, &group);
                }
            }

            // Unlabeled stream: pseudo-label against the buffer.
            if spec.ssl.enabled {
                let cfg = SslConfig {
                    threshold: spec.threshold(domain, task),
                    ..spec.ssl
                };
                let mut unlabeled = pick(Role::Unlabeled);
                if !unlabeled.is_empty() {
                    unlabeled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                        spec.seed,
                        &[UNLABELED_TAG, domain as u64, task as u64],
                    )));
                    let mut record = SslRecord {
                        domain,
                        task,
                        threshold: cfg.threshold,
                        matched: 0,
                        discarded: 0,
                        correct: 0,
                        mean_similarity: 0.0,
                        histogram: BTreeMap::new(),
                    };
                    let mut stats = crate::ssl::SslStats::default();
                    for chunk in unlabeled.chunks(spec.batch_size) {
                        stream.push(StreamEvent {
                            index: stream.len(),
                            domain,
                            task,
                            kind: StreamKind::Unlabeled,
                            samples: chunk.to_vec(),
                        });
                        let batch: Vec<&FVec> = chunk.iter().map(|&i| rep(i)).collect();
                        let out = apply_unlabeled_batch(&mut store, &buffer, &batch, &cfg)
                            .map_err(|e| wrap(e.into()))?;
                        for (&i, a) in chunk.iter().zip(&out.assignments) {
                            if a.is_some_and(|l| l.key.class == dataset.samples[i].class) {
                                record.correct += 1;
                            }
                        }
                        stats.absorb(&out.stats);
                    }
                    record.matched = stats.matched;
                    record.discarded = stats.discarded;
                    record.mean_similarity = stats.mean_similarity();
                    record.histogram = stats.histogram;
                    ssl_records.push(record);
                }
            }
            buffer.end_task();

            seen.extend(classes);
            seen.sort_unstable();
            seen_tasks.push(task);
            let prepared = store.prepare().map_err(|e| wrap(e.into()))?;

            // a_t over every class seen so far in this domain.
            let items: Vec<&TestItem> = test_items
                .iter()
                .filter(|t| seen.contains(&t.class))
                .collect();
            if items.is_empty() {
                return Err(wrap(ScenarioError::InvalidSpec(format!(
                    "no test samples for the classes seen in domain {domain}"
                ))));
            }
            let pairs = par::map(&items, |t| {
                prepared
                    .classify(domain, t.representation)
                    .map(|p| (p.winner, t.class))
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| wrap(e.into()))?;
            let acc = metrics::accuracy(&pairs).expect("non-empty");
            task_accuracies.push(TaskAccuracy {
                domain,
                task,
                position,
                n_correct: acc.n_correct,
                n_total: acc.n_total,
                a_t: acc.accuracy,
            });
            confusion.push(ConfusionRecord {
                domain,
                after_task: task,
                confusion: acc.confusion,
            });
            for &t in &seen_tasks {
                let own = &dataset.manifest.task(t).expect("validated").classes;
                let sub: Vec<(u32, u32)> = pairs
                    .iter()
                    .copied()
                    .filter(|(_, c)| own.contains(c))
                    .collect();
                if let Ok(a) = metrics::accuracy(&sub) {
                    task_slices.push(TaskSlice {
                        domain,
                        after_task: task,
                        task: t,
                        n_correct: a.n_correct,
                        n_total: a.n_total,
                        accuracy: a.accuracy,
                    });
                }
            }

            // Late fusion over every domain that knows all seen classes.
            if spec.evaluate_fused {
                let partners: Vec<u16> = domains
                    .iter()
                    .copied()
                    .filter(|&e| {
                        let known = store.classes(e);
                        seen.iter().all(|c| known.contains(c))
                    })
                    .collect();
                if partners.len() >= 2 {
                    let mut paired: Vec<(BTreeMap<u16, &[f64]>, u32)> = Vec::new();
                    for &class in &seen {
                        let Some(own) = test_index.get(&domain).and_then(|m| m.get(&class)) else {
                            continue;
                        };
                        for (k, _) in own.iter().enumerate() {
                            let inputs: Option<BTreeMap<u16, &[f64]>> = partners
                                .iter()
                                .map(|&e| {
                                    test_index
                                        .get(&e)
                                        .and_then(|m| m.get(&class))
                                        .and_then(|v| v.get(k))
                                        .map(|&i| (e, rep(i).as_slice()))
                                })
                                .collect();
                            if let Some(inputs) = inputs {
                                paired.push((inputs, class));
                            }
                        }
                    }
                    let fused_pairs = par::map(&paired, |(inputs, class)| {
                        prepared
                            .classify_fused_within(inputs, &seen)
                            .map(|p| (p.winner, *class))
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| wrap(e.into()))?;
                    if let Ok(a) = metrics::accuracy(&fused_pairs) {
                        fused.push(FusedAccuracy {
                            domain,
                            task,
                            domains: partners,
                            n_correct: a.n_correct,
                            n_total: a.n_total,
                            accuracy: a.accuracy,
                        });
                    }
                }
            }

            // Re-evaluate every other trained domain on its own known classes.
            for &other in domains.iter().filter(|&&e| e != domain) {
                let known = store.classes(other);
                if known.is_empty() {
                    continue;
                }
                let items: Vec<usize> = known
                    .iter()
                    .filter_map(|c| test_index.get(&other).and_then(|m| m.get(c)))
                    .flatten()
                    .copied()
                    .collect();
                let pairs = par::map(&items, |&i| {
                    prepared
                        .classify(other, rep(i))
                        .map(|p| (p.winner, dataset.samples[i].class))
                })
                .into_iter()
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| wrap(e.into()))?;
                if let Ok(a) = metrics::accuracy(&pairs) {
                    cross_domain.push(CrossEvaluation {
                        after_domain: domain,
                        after_task: task,
                        domain: other,
                        n_correct: a.n_correct,
                        n_total: a.n_total,
                        accuracy: a.accuracy,
                    });
                }
            }

            observer(&TaskCheckpoint {
                domain,
                task,
                position,
                store: &store,
                prepared: &prepared,
                test_items: &test_items,
            });
            log::info!(
                "domain {domain} task {task}: a_t = {:.4} ({} / {})",
                task_accuracies.last().map_or(0.0, |t: &TaskAccuracy| t.a_t),
                task_accuracies
                    .last()
                    .map_or(0, |t: &TaskAccuracy| t.n_correct),
                task_accuracies
                    .last()
                    .map_or(0, |t: &TaskAccuracy| t.n_total),
            );
        }
    }

    let config = serde_json::to_value(spec).expect("spec encodes");
    let report = RunReport::assemble(
        spec.seed,
        config,
        task_accuracies,
        fused,
        cross_domain,
        task_slices,
        confusion,
        ssl_records,
    )
    .map_err(|e| ScenarioError::InvalidSpec(e.to_string()))?;
    Ok(ScenarioOutcome {
        report,
        store,
        stream,
        roles,
    })
}

/// Picks the pseudo-label threshold on a validation split carved out of the
/// training data (`validation_fraction` per class). Every candidate runs the
/// full scenario with SSL on; selection maximizes A_D.
pub fn search_threshold(
    spec: &ScenarioSpec,
    dataset: &Dataset,
    candidates: &[f64],
    validation_fraction: f64,
) -> Result<ThresholdSearch, ScenarioError> {
    let validation = holdout_validation(dataset, validation_fraction, spec.seed)?;
    grid_search_threshold(candidates, |t| {
        let mut trial = spec.clone();
        trial.ssl.enabled = true;
        trial.ssl.threshold = t;
        trial.thresholds.clear();
        let report = run_scenario(&trial, &validation)?.report;
        Ok(CandidateScore {
            precision: report.ssl_precision(),
            matched: report.ssl.iter().map(|r| r.matched).sum(),
            accuracy: report.a_d,
        })
    })
}
