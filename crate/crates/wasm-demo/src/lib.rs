//! Browser bindings for the demo page in `www/`.
//!
//! Every entry point takes a JSON object of parameters (missing keys fall
//! back to defaults) and returns a JSON string. The plain functions are
//! ordinary Rust so they can be tested natively; the `#[wasm_bindgen]`
//! wrappers only convert the error type.

use exfc_core::scenario::{
    generate_synthetic, run_scenario, search_threshold, IlfrSpec, LayerSpec, NoiseSpec,
    NoiseTarget, ScenarioSpec, Split, SslProtocol, SyntheticSpec,
};
use exfc_core::{ClassKey, EngineConfig, PrototypeStore};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const MAX_GRID: usize = 400;
const MAX_SAMPLES: usize = 2000;

fn parse<T: for<'de> Deserialize<'de>>(input: &str) -> Result<T, String> {
    let input = if input.trim().is_empty() { "{}" } else { input };
    serde_json::from_str(input).map_err(|e| format!("bad parameters: {e}"))
}

fn encode<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionParams {
    pub seed: u64,
    pub classes: u32,
    pub samples_per_class: usize,
    pub separation: f64,
    pub anisotropy: f64,
    pub gamma: f64,
    /// Grid cells per side.
    pub resolution: usize,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            seed: 1,
            classes: 3,
            samples_per_class: 60,
            separation: 4.0,
            anisotropy: 4.0,
            gamma: 1.0,
            resolution: 120,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Regions {
    /// Plot window: `[x_min, x_max, y_min, y_max]`.
    pub bounds: [f64; 4],
    pub resolution: usize,
    /// Winning class per cell, row-major with row 0 at `y_min`.
    pub cells: Vec<u32>,
    pub points: Vec<(f64, f64, u32)>,
    pub means: Vec<(f64, f64, u32)>,
}

/// Fits one prototype per class on 2-d synthetic data and labels a grid.
pub fn decision_regions_json(input: &str) -> Result<String, String> {
    let p: RegionParams = parse(input)?;
    if !(1..=MAX_GRID).contains(&p.resolution) {
        return Err(format!("resolution must be in 1..={MAX_GRID}"));
    }
    if !(2..=8).contains(&p.classes) {
        return Err("classes must be between 2 and 8".into());
    }
    if p.samples_per_class > MAX_SAMPLES {
        return Err(format!("at most {MAX_SAMPLES} samples per class"));
    }
    let mut spec = SyntheticSpec {
        seed: p.seed,
        tasks: 1,
        classes_per_task: p.classes,
        samples_per_class: p.samples_per_class,
        objects_per_class: 1,
        ..Default::default()
    };
    spec.domains.truncate(1);
    spec.domains[0].layers = vec![LayerSpec {
        dim: 2,
        signal: 1.0,
    }];
    spec.domains[0].separation = p.separation;
    spec.domains[0].anisotropy = p.anisotropy;
    let dataset = generate_synthetic(&spec).map_err(|e| e.to_string())?;

    let mut store = PrototypeStore::new(EngineConfig {
        gamma1: p.gamma,
        gamma2: p.gamma,
        ..Default::default()
    });
    let mut points = Vec::new();
    for class in 0..p.classes {
        let batch: Vec<&[f64]> = dataset
            .samples
            .iter()
            .filter(|s| s.class == class && s.split == Split::Train)
            .map(|s| s.features.layers()[0].as_slice())
            .collect();
        points.extend(batch.iter().map(|v| (v[0], v[1], class)));
        store
            .observe_batch(ClassKey::new(0, class), 0, &batch)
            .map_err(|e| e.to_string())?;
    }
    let prepared = store.prepare().map_err(|e| e.to_string())?;

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &(x, y, _) in &points {
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    }
    let pad = [(hi[0] - lo[0]) * 0.1 + 0.5, (hi[1] - lo[1]) * 0.1 + 0.5];
    let bounds = [
        lo[0] - pad[0],
        hi[0] + pad[0],
        lo[1] - pad[1],
        hi[1] + pad[1],
    ];
    let n = p.resolution;
    let step = |i: usize, a: f64, b: f64| a + (b - a) * (i as f64 + 0.5) / n as f64;
    let mut cells = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let q = [
                step(col, bounds[0], bounds[1]),
                step(row, bounds[2], bounds[3]),
            ];
            cells.push(prepared.classify(0, &q).map_err(|e| e.to_string())?.winner);
        }
    }
    let means = store
        .iter()
        .map(|proto| {
            let m = proto.moments.mean();
            (m[0], m[1], proto.key.class)
        })
        .collect();
    encode(&Regions {
        bounds,
        resolution: n,
        cells,
        points,
        means,
    })
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkParams {
    pub seed: u64,
    pub tasks: u32,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation_a: f64,
    pub separation_b: f64,
    /// Test-time noise added to the second domain.
    pub noise_b: f64,
    pub ilfr_k: usize,
    pub protocol: SslProtocol,
    pub threshold: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 5,
            dim: 16,
            samples_per_class: 100,
            separation_a: 10.0,
            separation_b: 6.0,
            noise_b: 0.0,
            ilfr_k: 2,
            protocol: SslProtocol::None,
            threshold: 0.9,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct DomainCurve {
    pub domain: u16,
    pub a_t: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchmarkResult {
    pub domains: Vec<DomainCurve>,
    /// Fused accuracy while the second domain trains, per task.
    pub fused: Vec<f64>,
    pub a_d: f64,
    pub pseudo_labels: usize,
    pub pseudo_label_precision: f64,
}

fn benchmark_inputs(p: &BenchmarkParams) -> Result<(SyntheticSpec, ScenarioSpec), String> {
    if !(1..=10).contains(&p.tasks) || !(1..=64).contains(&p.dim) {
        return Err("tasks must be in 1..=10 and dim in 1..=64".into());
    }
    if p.samples_per_class > MAX_SAMPLES / 4 {
        return Err(format!("at most {} samples per class", MAX_SAMPLES / 4));
    }
    let mut data = SyntheticSpec {
        seed: p.seed,
        tasks: p.tasks,
        samples_per_class: p.samples_per_class,
        ..Default::default()
    };
    for d in &mut data.domains {
        d.layers = vec![
            LayerSpec {
                dim: p.dim,
                signal: 1.0
            };
            2
        ];
    }
    data.domains[0].separation = p.separation_a;
    data.domains[1].separation = p.separation_b;
    let mut scenario = ScenarioSpec {
        seed: p.seed,
        protocol: p.protocol,
        ilfr: IlfrSpec {
            k: p.ilfr_k,
            ..Default::default()
        },
        ..Default::default()
    };
    scenario.ssl.threshold = p.threshold;
    if p.noise_b > 0.0 {
        scenario.noise.push(NoiseSpec {
            domain: 1,
            sigma: p.noise_b,
            applies_to: NoiseTarget::Test,
        });
    }
    Ok((data, scenario))
}

/// Trains both synthetic modalities task by task and reports the curves.
pub fn run_benchmark_json(input: &str) -> Result<String, String> {
    let p: BenchmarkParams = parse(input)?;
    let (data, scenario) = benchmark_inputs(&p)?;
    let dataset = generate_synthetic(&data).map_err(|e| e.to_string())?;
    let report = run_scenario(&scenario, &dataset)
        .map_err(|e| e.to_string())?
        .report;
    let domains = report
        .domain_averages
        .iter()
        .map(|d| DomainCurve {
            domain: d.domain,
            a_t: report.a_t(d.domain),
            average: d.a_t_mean,
        })
        .collect();
    encode(&BenchmarkResult {
        domains,
        fused: report
            .fused
            .iter()
            .filter(|f| f.domain == 1)
            .map(|f| f.accuracy)
            .collect(),
        a_d: report.a_d,
        pseudo_labels: report.ssl.iter().map(|r| r.matched).sum(),
        pseudo_label_precision: report.ssl_precision(),
    })
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub precision: f64,
    pub matched: usize,
    pub accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub best: f64,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    /// Dataset and scenario. When omitted, the sweep uses a small 4σ
    /// benchmark with unlabeled data; a partial object fills its gaps from
    /// the ordinary benchmark defaults.
    #[serde(default = "sweep_benchmark")]
    pub benchmark: BenchmarkParams,
    pub candidates: Vec<f64>,
}

fn sweep_benchmark() -> BenchmarkParams {
    BenchmarkParams {
        dim: 8,
        tasks: 3,
        separation_a: 4.0,
        separation_b: 4.0,
        ilfr_k: 1,
        protocol: SslProtocol::RandomImages,
        ..Default::default()
    }
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            benchmark: sweep_benchmark(),
            candidates: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }
}

/// Grid search over pseudo-label thresholds on a validation split.
pub fn pseudo_label_sweep_json(input: &str) -> Result<String, String> {
    let p: SweepParams = parse(input)?;
    if p.candidates.is_empty() || p.candidates.len() > 20 {
        return Err("give between 1 and 20 candidate thresholds".into());
    }
    if p.benchmark.protocol == SslProtocol::None {
        return Err("the sweep needs unlabeled data; pick a protocol other than none".into());
    }
    let (data, scenario) = benchmark_inputs(&p.benchmark)?;
    let dataset = generate_synthetic(&data).map_err(|e| e.to_string())?;
    let search =
        search_threshold(&scenario, &dataset, &p.candidates, 0.25).map_err(|e| e.to_string())?;
    encode(&Sweep {
        best: search.best,
        rows: search
            .rows
            .iter()
            .map(|(t, s)| SweepRow {
                threshold: *t,
                precision: s.precision,
                matched: s.matched,
                accuracy: s.accuracy,
            })
            .collect(),
    })
}

#[wasm_bindgen]
pub fn decision_regions(params: &str) -> Result<String, JsValue> {
    decision_regions_json(params).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn run_benchmark(params: &str) -> Result<String, JsValue> {
    run_benchmark_json(params).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn pseudo_label_sweep(params: &str) -> Result<String, JsValue> {
    pseudo_label_sweep_json(params).map_err(JsValue::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn regions_cover_the_grid() {
        let out: Value =
            serde_json::from_str(&decision_regions_json(r#"{"resolution": 20}"#).unwrap()).unwrap();
        assert_eq!(out["cells"].as_array().unwrap().len(), 400);
        assert_eq!(out["means"].as_array().unwrap().len(), 3);
        // 60 samples per class, 12 of them held out for testing
        assert_eq!(out["points"].as_array().unwrap().len(), 3 * 48);
        let seen: std::collections::BTreeSet<u64> = out["cells"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .collect();
        assert_eq!(seen.len(), 3, "every class should own part of the plane");
    }

    #[test]
    fn regions_reject_bad_input() {
        assert!(decision_regions_json(r#"{"resolution": 0}"#).is_err());
        assert!(decision_regions_json(r#"{"classes": 1}"#).is_err());
        assert!(decision_regions_json(r#"{"colour": 1}"#).is_err());
        assert!(decision_regions_json("not json").is_err());
    }

    #[test]
    fn benchmark_defaults_and_noise() {
        let clean: Value = serde_json::from_str(&run_benchmark_json("").unwrap()).unwrap();
        assert_eq!(clean["domains"].as_array().unwrap().len(), 2);
        assert_eq!(clean["domains"][0]["a_t"].as_array().unwrap().len(), 5);
        assert_eq!(clean["fused"].as_array().unwrap().len(), 5);
        let noisy: Value =
            serde_json::from_str(&run_benchmark_json(r#"{"noise_b": 3.0}"#).unwrap()).unwrap();
        let avg = |v: &Value| v["domains"][1]["average"].as_f64().unwrap();
        assert!(avg(&noisy) < avg(&clean));
    }

    #[test]
    fn sweep_rows_are_sorted() {
        let out: Value = serde_json::from_str(
            &pseudo_label_sweep_json(r#"{"candidates": [0.9, 0.6, 0.75]}"#).unwrap(),
        )
        .unwrap();
        let t: Vec<f64> = out["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["threshold"].as_f64().unwrap())
            .collect();
        assert_eq!(t, vec![0.6, 0.75, 0.9]);
        assert!(pseudo_label_sweep_json(r#"{"benchmark": {"protocol": "none"}}"#).is_err());
        assert!(pseudo_label_sweep_json(r#"{"candidates": []}"#).is_err());
    }
}
