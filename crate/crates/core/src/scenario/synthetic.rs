//! Seeded Gaussian cluster data with a known class structure.
//!
//! Every (domain, layer, class) cluster has its own mean and covariance. The
//! within-class scale is 1, so `separation` is measured in within-class
//! standard deviations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, Dataset, DatasetManifest, DomainEntry, Sample, SampleSource, ScenarioError, Split,
    TaskEntry,
};
use crate::ilfr::LayerFeatures;
use crate::linalg::FVec;

const MEAN_TAG: u64 = 1;
const COV_TAG: u64 = 2;
const DRAW_TAG: u64 = 3;
const SHIFT_TAG: u64 = 4;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub dim: usize,
    /// Fraction of the domain's separation present in this layer; 0 makes
    /// the layer pure noise.
    #[serde(default = "one")]
    pub signal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
    /// Per-axis variances are drawn from [1, anisotropy].
    #[serde(default = "one")]
    pub anisotropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub domains: Vec<SyntheticDomainSpec>,
    pub tasks: u32,
    pub classes_per_task: u32,
    pub samples_per_class: usize,
    pub objects_per_class: u32,
    /// Distance of each object's sub-cluster from its class mean.
    pub object_shift: f64,
    /// Offset applied to every test sample of a class, along a per-class
    /// random direction.
    pub test_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let domain = |name: &str, separation: f64| SyntheticDomainSpec {
            name: name.into(),
            layers: vec![
                LayerSpec {
                    dim: 32,
                    signal: 1.0,
                },
                LayerSpec {
                    dim: 32,
                    signal: 1.0,
                },
            ],
            separation,
            anisotropy: 2.0,
        };
        Self {
            // The second modality is deliberately the weaker one.
            domains: vec![domain("vision", 10.0), domain("tactile", 6.0)],
            tasks: 5,
            classes_per_task: 2,
            samples_per_class: 100,
            objects_per_class: 3,
            object_shift: 0.0,
            test_shift: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidSpec(m));
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        if self.domains.len() > u16::MAX as usize {
            return bad("too many domains".into());
        }
        if self.tasks == 0 || self.classes_per_task == 0 {
            return bad("tasks and classes per task must be positive".into());
        }
        if self.samples_per_class < 2 {
            return bad("samples per class must be at least 2 (one train, one test)".into());
        }
        if self.objects_per_class == 0 {
            return bad("objects per class must be positive".into());
        }
        for (name, v) in [
            ("object_shift", self.object_shift),
            ("test_shift", self.test_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        for d in &self.domains {
            if d.layers.is_empty() {
                return bad(format!("domain {:?} has no layers", d.name));
            }
            if let Some(l) = d.layers.iter().find(|l| l.dim == 0 || !(l.signal >= 0.0)) {
                return bad(format!(
                    "domain {:?}: invalid layer (dim {}, signal {})",
                    d.name, l.dim, l.signal
                ));
            }
            if !(d.separation >= 0.0 && d.separation.is_finite()) {
                return bad(format!(
                    "domain {:?}: separation must be finite and >= 0",
                    d.name
                ));
            }
            if !(d.anisotropy >= 1.0 && d.anisotropy.is_finite()) {
                return bad(format!("domain {:?}: anisotropy must be >= 1", d.name));
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> u32 {
        self.tasks * self.classes_per_task
    }

    /// Test samples per class: 20% of the total, at least one.
    pub fn test_per_class(&self) -> usize {
        ((self.samples_per_class as f64 * 0.2).round() as usize)
            .clamp(1, self.samples_per_class - 1)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Columns of a random orthogonal matrix (Gram-Schmidt on Gaussian columns).
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v = gaussian(rng, dim);
        for _ in 0..2 {
            for q in &cols {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (x, qx) in v.iter_mut().zip(q) {
                    *x -= p * qx;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    cols
}

/// Class means whose minimum pairwise distance is exactly `separation`:
/// a rotated regular simplex when it fits, otherwise random directions
/// rescaled.
fn class_means(rng: &mut ChaCha8Rng, classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if classes <= dim {
        let q = random_orthogonal(rng, dim);
        let r = separation / std::f64::consts::SQRT_2;
        return q[..classes]
            .iter()
            .map(|c| c.iter().map(|x| x * r).collect())
            .collect();
    }
    let points: Vec<Vec<f64>> = (0..classes).map(|_| unit(rng, dim)).collect();
    let mut min = f64::INFINITY;
    for i in 0..classes {
        for j in i + 1..classes {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    let scale = if min > 0.0 { separation / min } else { 0.0 };
    points
        .into_iter()
        .map(|p| p.into_iter().map(|x| x * scale).collect())
        .collect()
}

struct Cluster {
    mean: Vec<f64>,
    rotation: Vec<Vec<f64>>,
    std: Vec<f64>,
    objects: Vec<Vec<f64>>,
    test_offset: Vec<f64>,
}

impl Cluster {
    fn draw(&self, rng: &mut ChaCha8Rng, object: usize, test: bool) -> Vec<f64> {
        let dim = self.mean.len();
        let z = gaussian(rng, dim);
        let mut x = self.mean.clone();
        for (k, col) in self.rotation.iter().enumerate() {
            let a = self.std[k] * z[k];
            for (xi, ci) in x.iter_mut().zip(col) {
                *xi += a * ci;
            }
        }
        for (xi, oi) in x.iter_mut().zip(&self.objects[object]) {
            *xi += oi;
        }
        if test {
            for (xi, ti) in x.iter_mut().zip(&self.test_offset) {
                *xi += ti;
            }
        }
        x
    }
}

/// Generates the dataset in memory. Samples are ordered by domain, then
/// class, with each class's training samples before its test samples.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, ScenarioError> {
    spec.validate()?;
    let classes = spec.class_count() as usize;
    let n = spec.samples_per_class;
    let n_test = spec.test_per_class();
    let n_train = n - n_test;
    for d in &spec.domains {
        for l in &d.layers {
            if (n_train as f64) < l.dim as f64 / 4.0 {
                log::warn!(
                    "domain {:?}: {} training samples per class for a {}-dimensional layer; \
                     covariances will be poorly conditioned",
                    d.name,
                    n_train,
                    l.dim
                );
            }
        }
    }

    let tasks: Vec<TaskEntry> = (0..spec.tasks)
        .map(|t| TaskEntry {
            id: t,
            classes: (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect(),
        })
        .collect();
    let mut domains = Vec::new();
    let mut samples = Vec::new();
    for (di, d) in spec.domains.iter().enumerate() {
        let domain = di as u16;
        domains.push(DomainEntry {
            id: domain,
            name: d.name.clone(),
            layer_dims: d.layers.iter().map(|l| l.dim).collect(),
            files: Vec::new(),
        });
        // clusters[layer][class]
        let clusters: Vec<Vec<Cluster>> = d
            .layers
            .iter()
            .enumerate()
            .map(|(li, l)| {
                let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &[MEAN_TAG, di as u64, li as u64],
                ));
                let means = class_means(&mut mrng, classes, l.dim, d.separation * l.signal);
                means
                    .into_iter()
                    .enumerate()
                    .map(|(c, mean)| {
                        let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(
                            spec.seed,
                            &[COV_TAG, di as u64, li as u64, c as u64],
                        ));
                        let std = (0..l.dim)
                            .map(|_| crng.random_range(1.0..=d.anisotropy).sqrt())
                            .collect();
                        let rotation = random_orthogonal(&mut crng, l.dim);
                        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(
                            spec.seed,
                            &[SHIFT_TAG, di as u64, li as u64, c as u64],
                        ));
                        let objects = (0..spec.objects_per_class)
                            .map(|_| {
                                unit(&mut srng, l.dim)
                                    .into_iter()
                                    .map(|x| x * spec.object_shift)
                                    .collect()
                            })
                            .collect();
                        let test_offset = unit(&mut srng, l.dim)
                            .into_iter()
                            .map(|x| x * spec.test_shift)
                            .collect();
                        Cluster {
                            mean,
                            rotation,
                            std,
                            objects,
                            test_offset,
                        }
                    })
                    .collect()
            })
            .collect();

        for task in &tasks {
            for &class in &task.classes {
                let mut rngs: Vec<ChaCha8Rng> = (0..d.layers.len())
                    .map(|li| {
                        ChaCha8Rng::seed_from_u64(derive_seed(
                            spec.seed,
                            &[DRAW_TAG, di as u64, li as u64, class as u64],
                        ))
                    })
                    .collect();
                for i in 0..n {
                    let test = i >= n_train;
                    let object = i % spec.objects_per_class as usize;
                    let layers = clusters
                        .iter()
                        .zip(&mut rngs)
                        .map(|(per_class, rng)| {
                            FVec::new(per_class[class as usize].draw(rng, object, test))
                                .expect("finite draws")
                        })
                        .collect();
                    samples.push(Sample {
                        domain,
                        task: task.id,
                        class,
                        object: object as u32,
                        split: if test { Split::Test } else { Split::Train },
                        features: LayerFeatures::new(layers).expect("non-empty layers"),
                        source: SampleSource {
                            file: 0,
                            offset: samples.len() as u64,
                        },
                    });
                }
            }
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            name: "synthetic".into(),
            domains,
            tasks,
        },
        samples,
    })
}
