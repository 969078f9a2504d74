//! The `exfc` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data integrity
//! error (corrupt store, malformed feature file), 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::engine::{load_store, save_store, MergeMode, PersistError};
use crate::format::{FloatWidth, HEADER_LEN};
use crate::metrics::{self, export_report, ExportFormat, MetricsError, RunReport};
use crate::scenario::{
    generate_synthetic, load_manifest, run_scenario, save_dataset, search_threshold, Dataset,
    ErrorClass, FeatureFormat, NoiseSpec, NoiseTarget, ScenarioError, ScenarioSpec, SslProtocol,
    SyntheticSpec,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INTEGRITY: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "exfc",
    version,
    about = "Rehearsal-free continual learning with Gaussian class prototypes"
)]
pub struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus feature files).
    Gen(GenArgs),
    /// Run a scenario and write the report tables and the prototype store.
    Run(RunArgs),
    /// Summarize a prototype store file.
    Inspect(InspectArgs),
    /// Grid-search the pseudo-label threshold on held-out training data.
    SearchThreshold(SearchArgs),
    /// Run the same scenario under consecutive seeds and aggregate.
    Repeat(RepeatArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set synthetic.tasks=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<FeatureFormat>,
    /// Dimension of every layer of every domain.
    #[arg(long)]
    dim: Option<usize>,
    /// Number of layers per domain.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    tasks: Option<u32>,
    #[arg(long)]
    classes_per_task: Option<u32>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Class separation of every domain.
    #[arg(long)]
    separation: Option<f64>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set scenario.engine.gamma1=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable pseudo-labeling.
    #[arg(long)]
    no_ssl: bool,
    /// Gaussian noise added to one domain's raw features.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Domain receiving `--noise-sigma` (default: the last scheduled domain).
    #[arg(long)]
    noise_domain: Option<u16>,
    #[arg(long)]
    noise_target: Option<NoiseTarget>,
    #[arg(long)]
    merge_mode: Option<MergeMode>,
    #[arg(long)]
    ilfr_k: Option<usize>,
    #[arg(long)]
    protocol: Option<SslProtocol>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Where to write the prototype store (default: inside the report directory).
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    store_width: Option<FloatWidth>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    store: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    candidates: String,
    /// Fraction of each class's training samples held out for validation.
    #[arg(long, default_value_t = 0.25)]
    validation_fraction: f64,
}

#[derive(Debug, Args)]
struct RepeatArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Number of runs; seeds are `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 3)]
    runs: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Option<FeatureFormat>,
    synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    manifest: Option<PathBuf>,
    report_dir: Option<PathBuf>,
    store: Option<PathBuf>,
    store_width: Option<FloatWidth>,
    scenario: ScenarioSpec,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => EXIT_USAGE,
            ErrorClass::Integrity => EXIT_INTEGRITY,
            ErrorClass::Numerical => EXIT_NUMERICAL,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::Io { .. } => EXIT_USAGE,
            _ => EXIT_INTEGRITY,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Parses the process arguments, runs the command and returns its exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("EXFC_LOG")
        .format_timestamp(None)
        .init();
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("EXFC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Failure::usage(anyhow!(
            "EXFC_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(anyhow!("cannot size the worker pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    log::debug!("EXFC_THREADS={n} ignored: built without parallelism");
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::SearchThreshold(a) => cmd_search_threshold(a),
        Command::Repeat(a) => cmd_repeat(a),
    }
}

/// Loads a TOML file (or an empty table), applies `KEY=VALUE` overrides and
/// deserializes the result. Relative paths stay relative to the working
/// directory.
fn load_config<T: serde::de::DeserializeOwned>(
    path: Option<&Path>,
    overrides: &[String],
) -> CliResult<T> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))
                .map_err(Failure::usage)?;
            toml::from_str::<toml::Table>(&text)
                .with_context(|| format!("{}: invalid config", p.display()))
                .map_err(Failure::usage)?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o).map_err(Failure::usage)?;
    }
    T::deserialize(toml::Value::Table(table))
        .context("invalid configuration")
        .map_err(Failure::usage)
}

/// Sets a dotted key. The value is read as a TOML value when it parses as
/// one and as a plain string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not KEY=VALUE"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("bad override key {key:?}"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {p} is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn require_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<u64> {
    flag.or(config).ok_or_else(|| {
        Failure::usage(anyhow!(
            "a seed is required (--seed N or `seed` in the config)"
        ))
    })
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let mut cfg: GenConfig = load_config(a.config.as_deref(), &a.set)?;
    let seed = require_seed(a.seed, cfg.seed)?;
    let spec = &mut cfg.synthetic;
    spec.seed = seed;
    if let Some(layers) = a.layers {
        if layers == 0 {
            return Err(Failure::usage(anyhow!("--layers must be at least 1")));
        }
        for d in &mut spec.domains {
            let template = d.layers.last().cloned().expect("validated below");
            d.layers.resize(layers, template);
        }
    }
    if let Some(dim) = a.dim {
        if dim == 0 {
            return Err(Failure::usage(anyhow!("--dim must be at least 1")));
        }
        for l in spec.domains.iter_mut().flat_map(|d| d.layers.iter_mut()) {
            l.dim = dim;
        }
    }
    if let Some(s) = a.separation {
        spec.domains.iter_mut().for_each(|d| d.separation = s);
    }
    if let Some(t) = a.tasks {
        spec.tasks = t;
    }
    if let Some(c) = a.classes_per_task {
        spec.classes_per_task = c;
    }
    if let Some(n) = a.samples_per_class {
        spec.samples_per_class = n;
    }
    let out = a.out.or(cfg.out).unwrap_or_else(|| PathBuf::from("data"));
    let format = a.format.or(cfg.format).unwrap_or(FeatureFormat::Text);
    let dataset = generate_synthetic(&cfg.synthetic)?;
    let manifest = save_dataset(&dataset, &out, format)?;
    println!("wrote {}", manifest.display());
    print_dataset_summary(&dataset);
    Ok(())
}

fn print_dataset_summary(dataset: &Dataset) {
    use crate::scenario::Split;
    let m = &dataset.manifest;
    println!(
        "{} domains, {} tasks, {} classes per domain",
        m.domains.len(),
        m.tasks.len(),
        m.class_count()
    );
    for d in &m.domains {
        println!(
            "  domain {} ({}): layers {:?}, {} train / {} test samples",
            d.id,
            d.name,
            d.layer_dims,
            dataset.count(d.id, Split::Train),
            dataset.count(d.id, Split::Test)
        );
    }
}

struct Prepared {
    cfg: RunConfig,
    dataset: Dataset,
    report_dir: PathBuf,
}

fn prepare_scenario(a: &ScenarioArgs) -> CliResult<Prepared> {
    let mut cfg: RunConfig = load_config(a.config.as_deref(), &a.set)?;
    let seed = require_seed(a.seed, cfg.seed)?;
    let manifest = a
        .manifest
        .clone()
        .or(cfg.manifest.clone())
        .ok_or_else(|| Failure::usage(anyhow!("a manifest is required (--manifest PATH)")))?;
    let dataset = load_manifest(&manifest)?;
    let s = &mut cfg.scenario;
    s.seed = seed;
    if a.no_ssl {
        s.ssl.enabled = false;
    }
    if let Some(m) = a.merge_mode {
        s.engine.merge_mode = m;
    }
    if let Some(k) = a.ilfr_k {
        s.ilfr.k = k;
    }
    if let Some(p) = a.protocol {
        s.protocol = p;
    }
    if let Some(f) = a.labeled_fraction {
        s.labeled_fraction = f;
    }
    if let Some(t) = a.threshold {
        s.ssl.threshold = t;
    }
    if let Some(g) = a.gamma1 {
        s.engine.gamma1 = g;
    }
    if let Some(g) = a.gamma2 {
        s.engine.gamma2 = g;
    }
    if let Some(b) = a.batch_size {
        s.batch_size = b;
    }
    if let Some(sigma) = a.noise_sigma {
        let domain = match a.noise_domain {
            Some(d) => d,
            None => *s
                .domain_order
                .last()
                .or(dataset.manifest.domains.last().map(|d| &d.id))
                .expect("manifest has domains"),
        };
        s.noise.retain(|n| n.domain != domain);
        s.noise.push(NoiseSpec {
            domain,
            sigma,
            applies_to: a.noise_target.unwrap_or_default(),
        });
    } else if a.noise_domain.is_some() || a.noise_target.is_some() {
        return Err(Failure::usage(anyhow!(
            "--noise-domain/--noise-target need --noise-sigma"
        )));
    }
    let report_dir = a
        .out
        .clone()
        .or(cfg.report_dir.clone())
        .unwrap_or_else(|| PathBuf::from("reports"));
    Ok(Prepared {
        cfg,
        dataset,
        report_dir,
    })
}

fn print_report(report: &RunReport) {
    for t in &report.task_accuracies {
        println!(
            "domain {} task {}: a_t = {:.4} ({}/{})",
            t.domain, t.task, t.a_t, t.n_correct, t.n_total
        );
    }
    for f in &report.fused {
        println!(
            "domain {} task {}: fused = {:.4} ({}/{})",
            f.domain, f.task, f.accuracy, f.n_correct, f.n_total
        );
    }
    for d in &report.domain_averages {
        println!("domain {}: A_T = {:.4}", d.domain, d.a_t_mean);
    }
    println!("A_D = {:.4}", report.a_d);
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    let p = prepare_scenario(&a.scenario)?;
    let outcome = run_scenario(&p.cfg.scenario, &p.dataset)?;
    let report = &outcome.report;
    let mut written = export_report(report, &p.report_dir, ExportFormat::Table)?;
    written.extend(export_report(
        report,
        &p.report_dir,
        ExportFormat::Structured,
    )?);
    let width = a.store_width.or(p.cfg.store_width).unwrap_or_default();
    let store_path = a.store.or(p.cfg.store.clone()).unwrap_or_else(|| {
        p.report_dir
            .join(metrics::export_name(report, "store", "exfc"))
    });
    if let Some(parent) = store_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))
            .map_err(Failure::usage)?;
    }
    fs::write(&store_path, save_store(&outcome.store, width))
        .with_context(|| format!("cannot write {}", store_path.display()))
        .map_err(Failure::usage)?;
    print_report(report);
    println!(
        "store: {} ({} prototypes)",
        store_path.display(),
        outcome.store.len()
    );
    println!("report files: {}", written.len());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult<()> {
    let bytes = fs::read(&a.store)
        .with_context(|| format!("cannot read {}", a.store.display()))
        .map_err(Failure::usage)?;
    if bytes.is_empty() {
        println!("{}: 0 prototypes, 0 bytes", a.store.display());
        return Ok(());
    }
    let store = load_store(&bytes).map_err(|e: PersistError| Failure {
        code: EXIT_INTEGRITY,
        error: anyhow::Error::new(e)
            .context(format!("{}: integrity check failed", a.store.display())),
    })?;
    for p in store.iter() {
        println!(
            "domain {} class {}: count {}, dim {}, trace {:.6}",
            p.key.domain,
            p.key.class,
            p.moments.count(),
            p.moments.dim(),
            p.moments.covariance().trace()
        );
    }
    println!(
        "{} prototypes, {} bytes ({} header + records + checksum)",
        store.len(),
        bytes.len(),
        HEADER_LEN
    );
    Ok(())
}

/// Parses `start:end:step` (inclusive of `end` up to rounding) or a
/// comma-separated list.
pub fn parse_candidates(text: &str) -> anyhow::Result<Vec<f64>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let num = |s: &str| -> anyhow::Result<f64> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| anyhow!("bad number {s:?} in candidate list"))
    };
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, end, step] => {
            let (start, end, step) = (num(start)?, num(end)?, num(step)?);
            if step <= 0.0 || end < start {
                return Err(anyhow!("range needs start <= end and a positive step"));
            }
            let n = ((end - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..n)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        [_] => text
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(num)
            .collect(),
        _ => Err(anyhow!(
            "candidates must be start:end:step or a comma-separated list"
        )),
    }
}

fn cmd_search_threshold(a: SearchArgs) -> CliResult<()> {
    let candidates = parse_candidates(&a.candidates).map_err(Failure::usage)?;
    if candidates.is_empty() {
        return Err(Failure::usage(anyhow!("no candidate thresholds given")));
    }
    let p = prepare_scenario(&a.scenario)?;
    let search = search_threshold(
        &p.cfg.scenario,
        &p.dataset,
        &candidates,
        a.validation_fraction,
    )?;
    fs::create_dir_all(&p.report_dir)
        .with_context(|| format!("cannot create {}", p.report_dir.display()))
        .map_err(Failure::usage)?;
    let config = serde_json::to_value(&p.cfg.scenario).expect("spec encodes");
    let name = format!(
        "threshold_search-seed{}-{}.csv",
        p.cfg.scenario.seed,
        metrics::config_hash(&config)
    );
    let path = p.report_dir.join(name);
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::usage)?;
    let io = |e: csv::Error| Failure::usage(anyhow::Error::new(e));
    w.write_record(["threshold", "precision", "matched", "accuracy", "best"])
        .map_err(io)?;
    println!("threshold  precision  matched  accuracy");
    for (t, s) in &search.rows {
        let best = *t == search.best;
        w.write_record([
            t.to_string(),
            s.precision.to_string(),
            s.matched.to_string(),
            s.accuracy.to_string(),
            if best { "*".into() } else { String::new() },
        ])
        .map_err(io)?;
        println!(
            "{t:>9.4}  {:>9.4}  {:>7}  {:>8.4}{}",
            s.precision,
            s.matched,
            s.accuracy,
            if best { "  <- best" } else { "" }
        );
    }
    w.flush()
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::usage)?;
    println!("best threshold: {}", search.best);
    println!("table: {}", path.display());
    Ok(())
}

fn cmd_repeat(a: RepeatArgs) -> CliResult<()> {
    if a.runs == 0 {
        return Err(Failure::usage(anyhow!("--runs must be at least 1")));
    }
    let p = prepare_scenario(&a.scenario)?;
    let base = p.cfg.scenario.seed;
    let mut reports = Vec::new();
    for i in 0..a.runs as u64 {
        let mut spec = p.cfg.scenario.clone();
        spec.seed = base.wrapping_add(i);
        let outcome = run_scenario(&spec, &p.dataset)?;
        export_report(&outcome.report, &p.report_dir, ExportFormat::Table)?;
        export_report(&outcome.report, &p.report_dir, ExportFormat::Structured)?;
        println!("seed {}: A_D = {:.4}", spec.seed, outcome.report.a_d);
        reports.push(outcome.report);
    }
    let summary = metrics::aggregate(&reports)?;
    let config = serde_json::to_value(&p.cfg.scenario).expect("spec encodes");
    let path = p.report_dir.join(format!(
        "repeat-seed{}x{}-{}.json",
        base,
        a.runs,
        metrics::config_hash(&config)
    ));
    let mut text = serde_json::to_string_pretty(&summary).expect("summary encodes");
    text.push('\n');
    fs::write(&path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::usage)?;
    for (d, m) in &summary.domain_averages {
        println!("domain {d}: A_T = {:.4} +- {:.4}", m.mean, m.std);
    }
    println!(
        "A_D = {:.4} +- {:.4} over {} runs",
        summary.a_d.mean, summary.a_d.std, summary.a_d.n
    );
    println!("summary: {}", path.display());
    Ok(())
}
