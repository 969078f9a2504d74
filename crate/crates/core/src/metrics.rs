//! Accuracy bookkeeping, run reports and their table/JSON exports.
//!
//! Accuracies are kept as integer counts next to the real ratio so that the
//! per-domain and cross-domain averages can be recomputed exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot compute {0} of an empty set")]
    Empty(&'static str),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
}

/// Square confusion matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: Vec<u32>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn get(&self, truth: u32, predicted: u32) -> u64 {
        match (
            self.classes.binary_search(&truth),
            self.classes.binary_search(&predicted),
        ) {
            (Ok(i), Ok(j)) => self.counts[i][j],
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub n_correct: u64,
    pub n_total: u64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

pub fn ratio(n_correct: u64, n_total: u64) -> f64 {
    n_correct as f64 / n_total as f64
}

/// Scores `(winner, truth)` pairs.
pub fn accuracy(pairs: &[(u32, u32)]) -> Result<AccuracyResult, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("accuracy"));
    }
    let mut classes: Vec<u32> = pairs.iter().flat_map(|&(w, t)| [w, t]).collect();
    classes.sort_unstable();
    classes.dedup();
    let n = classes.len();
    let mut counts = vec![vec![0u64; n]; n];
    let mut n_correct = 0;
    for &(w, t) in pairs {
        let i = classes.binary_search(&t).expect("collected");
        let j = classes.binary_search(&w).expect("collected");
        counts[i][j] += 1;
        n_correct += u64::from(w == t);
    }
    let n_total = pairs.len() as u64;
    Ok(AccuracyResult {
        n_correct,
        n_total,
        accuracy: ratio(n_correct, n_total),
        confusion: Confusion { classes, counts },
    })
}

fn mean(values: &[f64], what: &'static str) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty(what));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// A_T: mean of one domain's per-task accuracies.
pub fn average_task(accuracies: &[f64]) -> Result<f64, MetricsError> {
    mean(accuracies, "task average")
}

/// A_D: mean of the per-domain task averages.
pub fn average_domain(task_averages: &[f64]) -> Result<f64, MetricsError> {
    mean(task_averages, "domain average")
}

/// Accuracy after training one task, over every class seen so far in the
/// domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub domain: u16,
    pub task: u32,
    /// Position of the task in the domain's schedule.
    pub position: usize,
    pub n_correct: u64,
    pub n_total: u64,
    pub a_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAverage {
    pub domain: u16,
    pub tasks: usize,
    pub a_t_mean: f64,
}

/// Late-fusion accuracy on paired test items after a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedAccuracy {
    pub domain: u16,
    pub task: u32,
    pub domains: Vec<u16>,
    pub n_correct: u64,
    pub n_total: u64,
    pub accuracy: f64,
}

/// Re-evaluation of a domain other than the one being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvaluation {
    pub after_domain: u16,
    pub after_task: u32,
    pub domain: u16,
    pub n_correct: u64,
    pub n_total: u64,
    pub accuracy: f64,
}

/// Accuracy on the test items of one task's classes, measured after
/// training `after_task` (predictions still compete among all seen classes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSlice {
    pub domain: u16,
    pub after_task: u32,
    pub task: u32,
    pub n_correct: u64,
    pub n_total: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingDelta {
    pub domain: u16,
    pub task: u32,
    /// Accuracy on the task's classes right after it was trained.
    pub initial: f64,
    /// Accuracy on the same items after the domain's last task.
    pub last: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRecord {
    pub domain: u16,
    pub after_task: u32,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslRecord {
    pub domain: u16,
    pub task: u32,
    pub threshold: f64,
    pub matched: usize,
    pub discarded: usize,
    /// Matches whose pseudo-label equals the hidden ground truth.
    pub correct: usize,
    pub mean_similarity: f64,
    pub histogram: BTreeMap<u32, usize>,
}

impl SslRecord {
    /// Correct matches over matches; 1 when nothing matched.
    pub fn precision(&self) -> f64 {
        if self.matched == 0 {
            1.0
        } else {
            self.correct as f64 / self.matched as f64
        }
    }
}

/// Mean a_t across domains at one schedule position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperiencePoint {
    pub position: usize,
    pub domains: usize,
    pub mean_a_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub task_accuracies: Vec<TaskAccuracy>,
    pub domain_averages: Vec<DomainAverage>,
    pub a_d: f64,
    pub fused: Vec<FusedAccuracy>,
    pub cross_domain: Vec<CrossEvaluation>,
    pub task_slices: Vec<TaskSlice>,
    pub forgetting: Vec<ForgettingDelta>,
    pub confusion: Vec<ConfusionRecord>,
    pub ssl: Vec<SslRecord>,
    pub per_experience: Vec<ExperiencePoint>,
}

impl RunReport {
    /// Builds the derived fields (A_T, A_D, forgetting, per-experience
    /// means) from the raw evaluation records.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        seed: u64,
        config: serde_json::Value,
        task_accuracies: Vec<TaskAccuracy>,
        fused: Vec<FusedAccuracy>,
        cross_domain: Vec<CrossEvaluation>,
        task_slices: Vec<TaskSlice>,
        confusion: Vec<ConfusionRecord>,
        ssl: Vec<SslRecord>,
    ) -> Result<Self, MetricsError> {
        let mut per_domain: Vec<(u16, Vec<f64>)> = Vec::new();
        for t in &task_accuracies {
            match per_domain.iter_mut().find(|(d, _)| *d == t.domain) {
                Some((_, v)) => v.push(t.a_t),
                None => per_domain.push((t.domain, vec![t.a_t])),
            }
        }
        let domain_averages = per_domain
            .iter()
            .map(|(d, v)| {
                Ok(DomainAverage {
                    domain: *d,
                    tasks: v.len(),
                    a_t_mean: average_task(v)?,
                })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        let a_d = average_domain(
            &domain_averages
                .iter()
                .map(|d| d.a_t_mean)
                .collect::<Vec<_>>(),
        )?;
        Ok(Self {
            seed,
            config_hash: config_hash(&config),
            config,
            forgetting: forgetting(&task_slices),
            per_experience: per_experience(&task_accuracies),
            task_accuracies,
            domain_averages,
            a_d,
            fused,
            cross_domain,
            task_slices,
            confusion,
            ssl,
        })
    }

    pub fn a_t(&self, domain: u16) -> Vec<f64> {
        self.task_accuracies
            .iter()
            .filter(|t| t.domain == domain)
            .map(|t| t.a_t)
            .collect()
    }

    pub fn domain_average(&self, domain: u16) -> Option<f64> {
        self.domain_averages
            .iter()
            .find(|d| d.domain == domain)
            .map(|d| d.a_t_mean)
    }

    /// Pooled pseudo-label precision over the whole run.
    pub fn ssl_precision(&self) -> f64 {
        let matched: usize = self.ssl.iter().map(|s| s.matched).sum();
        let correct: usize = self.ssl.iter().map(|s| s.correct).sum();
        if matched == 0 {
            1.0
        } else {
            correct as f64 / matched as f64
        }
    }
}

/// For each (domain, task): accuracy on its classes after the domain's last
/// task minus accuracy right after the task itself.
pub fn forgetting(slices: &[TaskSlice]) -> Vec<ForgettingDelta> {
    let mut out = Vec::new();
    let mut domains: Vec<u16> = slices.iter().map(|s| s.domain).collect();
    domains.dedup();
    for domain in domains {
        let own: Vec<&TaskSlice> = slices.iter().filter(|s| s.domain == domain).collect();
        let Some(last_after) = own.last().map(|s| s.after_task) else {
            continue;
        };
        for initial in own.iter().filter(|s| s.after_task == s.task) {
            if let Some(last) = own
                .iter()
                .find(|s| s.after_task == last_after && s.task == initial.task)
            {
                out.push(ForgettingDelta {
                    domain,
                    task: initial.task,
                    initial: initial.accuracy,
                    last: last.accuracy,
                    delta: last.accuracy - initial.accuracy,
                });
            }
        }
    }
    out
}

/// Averages a_t across domains by schedule position.
pub fn per_experience(accuracies: &[TaskAccuracy]) -> Vec<ExperiencePoint> {
    let mut by_pos: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in accuracies {
        by_pos.entry(t.position).or_default().push(t.a_t);
    }
    by_pos
        .into_iter()
        .map(|(position, v)| ExperiencePoint {
            position,
            domains: v.len(),
            mean_a_t: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect()
}

/// First 12 hex digits of the SHA-256 of the compact JSON encoding.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always encode");
    Sha256::digest(&bytes)[..6]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    /// One comma-separated table per metric family.
    Table,
    /// One JSON document holding the whole report.
    Structured,
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), MetricsError> {
    let io = |source: std::io::Error| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(header).map_err(|e| io(e.into()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

/// File name used for one export of `report`.
pub fn export_name(report: &RunReport, stem: &str, ext: &str) -> String {
    format!("{stem}-seed{}-{}.{ext}", report.seed, report.config_hash)
}

/// Writes the report into `dir` and returns the written paths.
pub fn export_report(
    report: &RunReport,
    dir: &Path,
    format: ExportFormat,
) -> Result<Vec<PathBuf>, MetricsError> {
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = |stem: &str, ext: &str| dir.join(export_name(report, stem, ext));
    if format == ExportFormat::Structured {
        let p = path("report", "json");
        let mut text = serde_json::to_string_pretty(report).expect("report encodes");
        text.push('\n');
        fs::write(&p, text).map_err(|source| MetricsError::Io {
            path: p.clone(),
            source,
        })?;
        return Ok(vec![p]);
    }

    let mut written = Vec::new();
    let mut table =
        |stem: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<(), MetricsError> {
            let p = path(stem, "csv");
            write_csv(&p, header, rows)?;
            written.push(p);
            Ok(())
        };
    table(
        "a_t",
        &["domain", "task", "position", "n_correct", "n_total", "a_t"],
        report
            .task_accuracies
            .iter()
            .map(|t| {
                vec![
                    s(t.domain),
                    s(t.task),
                    s(t.position),
                    s(t.n_correct),
                    s(t.n_total),
                    s(t.a_t),
                ]
            })
            .collect(),
    )?;
    table(
        "domain_average",
        &["domain", "tasks", "a_t_mean"],
        report
            .domain_averages
            .iter()
            .map(|d| vec![s(d.domain), s(d.tasks), s(d.a_t_mean)])
            .collect(),
    )?;
    table(
        "summary",
        &["seed", "config_hash", "domains", "a_d"],
        vec![vec![
            s(report.seed),
            report.config_hash.clone(),
            s(report.domain_averages.len()),
            s(report.a_d),
        ]],
    )?;
    table(
        "fused",
        &[
            "domain",
            "task",
            "domains",
            "n_correct",
            "n_total",
            "accuracy",
        ],
        report
            .fused
            .iter()
            .map(|f| {
                let ds: Vec<String> = f.domains.iter().map(|d| d.to_string()).collect();
                vec![
                    s(f.domain),
                    s(f.task),
                    ds.join("+"),
                    s(f.n_correct),
                    s(f.n_total),
                    s(f.accuracy),
                ]
            })
            .collect(),
    )?;
    table(
        "cross_domain",
        &[
            "after_domain",
            "after_task",
            "domain",
            "n_correct",
            "n_total",
            "accuracy",
        ],
        report
            .cross_domain
            .iter()
            .map(|c| {
                vec![
                    s(c.after_domain),
                    s(c.after_task),
                    s(c.domain),
                    s(c.n_correct),
                    s(c.n_total),
                    s(c.accuracy),
                ]
            })
            .collect(),
    )?;
    table(
        "task_slices",
        &[
            "domain",
            "after_task",
            "task",
            "n_correct",
            "n_total",
            "accuracy",
        ],
        report
            .task_slices
            .iter()
            .map(|t| {
                vec![
                    s(t.domain),
                    s(t.after_task),
                    s(t.task),
                    s(t.n_correct),
                    s(t.n_total),
                    s(t.accuracy),
                ]
            })
            .collect(),
    )?;
    table(
        "forgetting",
        &["domain", "task", "initial", "last", "delta"],
        report
            .forgetting
            .iter()
            .map(|f| vec![s(f.domain), s(f.task), s(f.initial), s(f.last), s(f.delta)])
            .collect(),
    )?;
    table(
        "per_experience",
        &["position", "domains", "mean_a_t"],
        report
            .per_experience
            .iter()
            .map(|e| vec![s(e.position), s(e.domains), s(e.mean_a_t)])
            .collect(),
    )?;
    table(
        "ssl",
        &[
            "domain",
            "task",
            "threshold",
            "matched",
            "discarded",
            "correct",
            "precision",
            "mean_similarity",
        ],
        report
            .ssl
            .iter()
            .map(|r| {
                vec![
                    s(r.domain),
                    s(r.task),
                    s(r.threshold),
                    s(r.matched),
                    s(r.discarded),
                    s(r.correct),
                    s(r.precision()),
                    s(r.mean_similarity),
                ]
            })
            .collect(),
    )?;
    table(
        "ssl_histogram",
        &["domain", "task", "class", "matched"],
        report
            .ssl
            .iter()
            .flat_map(|r| {
                r.histogram
                    .iter()
                    .map(move |(c, n)| vec![s(r.domain), s(r.task), s(c), s(n)])
            })
            .collect(),
    )?;
    table(
        "confusion",
        &["domain", "after_task", "truth", "predicted", "count"],
        report
            .confusion
            .iter()
            .flat_map(|rec| {
                let classes = &rec.confusion.classes;
                rec.confusion
                    .counts
                    .iter()
                    .enumerate()
                    .flat_map(move |(i, row)| {
                        row.iter()
                            .enumerate()
                            .filter(|(_, n)| **n > 0)
                            .map(move |(j, n)| {
                                vec![
                                    s(rec.domain),
                                    s(rec.after_task),
                                    s(classes[i]),
                                    s(classes[j]),
                                    s(n),
                                ]
                            })
                    })
            })
            .collect(),
    )?;
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<RunReport, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd, MetricsError> {
    let m = mean(values, "mean")?;
    let n = values.len();
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(MeanStd { n, mean: m, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub domain: u16,
    pub task: u32,
    pub a_t: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub a_d: MeanStd,
    pub domain_averages: Vec<(u16, MeanStd)>,
    pub tasks: Vec<TaskSummary>,
}

/// Aggregates runs that share a configuration but differ in seed.
pub fn aggregate(reports: &[RunReport]) -> Result<RepeatSummary, MetricsError> {
    let first = reports
        .first()
        .ok_or(MetricsError::Empty("repeat summary"))?;
    let a_d = mean_std(&reports.iter().map(|r| r.a_d).collect::<Vec<_>>())?;
    let domain_averages = first
        .domain_averages
        .iter()
        .map(|d| {
            let v: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.domain_average(d.domain))
                .collect();
            Ok((d.domain, mean_std(&v)?))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let tasks = first
        .task_accuracies
        .iter()
        .map(|t| {
            let v: Vec<f64> = reports
                .iter()
                .filter_map(|r| {
                    r.task_accuracies
                        .iter()
                        .find(|x| x.domain == t.domain && x.task == t.task)
                        .map(|x| x.a_t)
                })
                .collect();
            Ok(TaskSummary {
                domain: t.domain,
                task: t.task,
                a_t: mean_std(&v)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(RepeatSummary {
        seeds: reports.iter().map(|r| r.seed).collect(),
        a_d,
        domain_averages,
        tasks,
    })
}
