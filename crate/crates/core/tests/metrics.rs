use std::fs;

use exfc_core::metrics::{export_report, load_report, ExportFormat, RunReport};
use exfc_core::scenario::*;

fn dataset(seed: u64) -> Dataset {
    let mut g = SyntheticSpec {
        seed,
        tasks: 3,
        samples_per_class: 60,
        ..Default::default()
    };
    for d in &mut g.domains {
        d.layers = vec![LayerSpec {
            dim: 10,
            signal: 1.0,
        }];
        d.separation = 3.0;
    }
    generate_synthetic(&g).unwrap()
}

fn spec(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        ilfr: IlfrSpec {
            k: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = m[col].clone();
        for row in col + 1..n {
            let f = m[row][col] / pivot_row[col];
            for (v, p) in m[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *v -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    x
}

/// Distance of `x` to a class given its raw moments, computed the long way.
fn naive_distance(x: &[f64], count: u64, mean: &[f64], m2: &[f64]) -> f64 {
    let n = mean.len();
    let cov: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| m2[i * n + j] / (count - 1) as f64).collect())
        .collect();
    let diag_mean = (0..n).map(|i| cov[i][i]).sum::<f64>() / n as f64;
    let off_mean = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| cov[i][j])
        .sum::<f64>()
        / (n * (n - 1)) as f64;
    let shrunk: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cov[i][j] + if i == j { diag_mean } else { off_mean })
                .collect()
        })
        .collect();
    let normalized: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| shrunk[i][j] / (shrunk[i][i].sqrt() * shrunk[j][j].sqrt() + 1e-8))
                .collect()
        })
        .collect();
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let y = solve(normalized, diff.clone());
    diff.iter().zip(&y).map(|(a, b)| a * b).sum()
}

#[test]
fn final_accuracy_matches_naive_rescoring() {
    let data = dataset(3);
    let mut captured = Vec::new();
    let last = data.manifest.tasks.len() - 1;
    let out = run_scenario_with(&spec(3), &data, |cp| {
        if cp.position == last {
            let protos: Vec<(u32, u64, Vec<f64>, Vec<f64>)> = cp
                .store
                .iter()
                .filter(|p| p.key.domain == cp.domain)
                .map(|p| {
                    let m = &p.moments;
                    (
                        p.key.class,
                        m.count(),
                        m.mean().to_vec(),
                        m.m2().as_slice().to_vec(),
                    )
                })
                .collect();
            let items: Vec<(u32, Vec<f64>)> = cp
                .test_items
                .iter()
                .map(|t| (t.class, t.representation.as_slice().to_vec()))
                .collect();
            captured.push((cp.domain, protos, items));
        }
    })
    .unwrap();
    assert_eq!(captured.len(), 2);

    for (domain, protos, items) in captured {
        let mut correct = 0u64;
        for (class, x) in &items {
            let best = protos
                .iter()
                .map(|(c, n, mean, m2)| (*c, naive_distance(x, *n, mean, m2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            correct += u64::from(best.0 == *class);
        }
        let reported = out
            .report
            .task_accuracies
            .iter()
            .find(|t| t.domain == domain && t.position == last)
            .unwrap();
        assert_eq!(reported.n_total, items.len() as u64);
        assert_eq!(reported.n_correct, correct, "domain {domain}");
        assert!(
            reported.a_t < 1.0,
            "benchmark should not be trivially solved"
        );
    }
}

#[test]
fn confusion_agrees_with_accuracy_counts() {
    let report = run_scenario(&spec(4), &dataset(4)).unwrap().report;
    assert_eq!(report.confusion.len(), report.task_accuracies.len());
    for (c, t) in report.confusion.iter().zip(&report.task_accuracies) {
        assert_eq!((c.domain, c.after_task), (t.domain, t.task));
        let classes = &c.confusion.classes;
        let total: u64 = c.confusion.row_sums().iter().sum();
        let diag: u64 = classes.iter().map(|&k| c.confusion.get(k, k)).sum();
        assert_eq!(total, t.n_total);
        assert_eq!(diag, t.n_correct);
        // 12 test samples per seen class
        assert!(c.confusion.row_sums().iter().all(|&r| r == 12));
    }
}

#[test]
fn forgetting_is_last_minus_initial_slice() {
    let report = run_scenario(&spec(5), &dataset(5)).unwrap().report;
    assert_eq!(report.forgetting.len(), 6);
    for f in &report.forgetting {
        let slices: Vec<_> = report
            .task_slices
            .iter()
            .filter(|s| s.domain == f.domain && s.task == f.task)
            .collect();
        assert_eq!(f.initial, slices.first().unwrap().accuracy);
        assert_eq!(f.last, slices.last().unwrap().accuracy);
        // negative delta means accuracy was lost
        assert_eq!(f.delta, f.last - f.initial);
    }
}

fn csv_rows(path: &std::path::Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

#[test]
fn table_export_has_one_row_per_record() {
    let report = run_scenario(&spec(6), &dataset(6)).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let files = export_report(&report, dir.path(), ExportFormat::Table).unwrap();
    assert_eq!(files.len(), 11);
    let find = |stem: &str| {
        files
            .iter()
            .find(|p| {
                p.file_name()
                    .unwrap()
                    .to_str()
                    .unwrap()
                    .starts_with(&format!("{stem}-seed6-"))
            })
            .unwrap_or_else(|| panic!("no {stem} export"))
            .clone()
    };
    let a_t = csv_rows(&find("a_t"));
    assert_eq!(a_t.len(), 6);
    for (row, t) in a_t.iter().zip(&report.task_accuracies) {
        assert_eq!(row[5].parse::<f64>().unwrap(), t.a_t);
    }
    assert_eq!(csv_rows(&find("domain_average")).len(), 2);
    let summary = csv_rows(&find("summary"));
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0][3].parse::<f64>().unwrap(), report.a_d);
    assert_eq!(
        csv_rows(&find("task_slices")).len(),
        report.task_slices.len()
    );
    assert_eq!(csv_rows(&find("per_experience")).len(), 3);
}

#[test]
fn structured_export_reloads_exactly() {
    let data = dataset(7);
    let mut s = spec(7);
    s.protocol = SslProtocol::RandomImages;
    s.ssl.threshold = 0.6;
    let report = run_scenario(&s, &data).unwrap().report;
    assert!(!report.ssl.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let files = export_report(&report, dir.path(), ExportFormat::Structured).unwrap();
    assert_eq!(files.len(), 1);
    let back: RunReport = load_report(&files[0]).unwrap();
    assert_eq!(back, report);
}

#[test]
fn identical_runs_export_identical_bytes() {
    let data = dataset(8);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let report = run_scenario(&spec(8), &data).unwrap().report;
        export_report(&report, dir.path(), ExportFormat::Table).unwrap();
        export_report(&report, dir.path(), ExportFormat::Structured).unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 12);
    for name in names {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn config_hash_tracks_the_configuration() {
    let data = dataset(9);
    let base = run_scenario(&spec(9), &data).unwrap().report;
    let mut changed = spec(9);
    changed.batch_size = 5;
    let other = run_scenario(&changed, &data).unwrap().report;
    assert_eq!(base.config_hash.len(), 12);
    assert_ne!(base.config_hash, other.config_hash);
    assert_eq!(
        base.config_hash,
        run_scenario(&spec(9), &data).unwrap().report.config_hash
    );
}
