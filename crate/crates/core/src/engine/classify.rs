use std::collections::BTreeMap;

use super::{ClassKey, EngineConfig, EngineError, PrototypeStore};
use crate::linalg::{self, LinalgError, SpdInverse};
use crate::par;

/// Mean and prepared inverse covariance of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClass {
    pub class: u32,
    pub mean: Vec<f64>,
    pub inverse: SpdInverse,
}

/// Immutable classifier state derived from a [`PrototypeStore`].
///
/// Safe to share across threads; all queries take `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClassifier {
    generation: u64,
    params: EngineConfig,
    domains: BTreeMap<u16, Vec<PreparedClass>>,
}

/// Result of one query. `ranked` is sorted ascending by distance with ties
/// broken by the smaller class id; `scores` are in class-id order and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub winner: u32,
    pub ranked: Vec<(u32, f64)>,
    pub scores: Vec<(u32, f64)>,
}

impl Prediction {
    pub fn score_of(&self, class: u32) -> Option<f64> {
        self.scores
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, s)| *s)
    }

    pub fn distance_of(&self, class: u32) -> Option<f64> {
        self.ranked
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, d)| *d)
    }

    fn from_distances(distances: Vec<(u32, f64)>) -> Self {
        let probs = softmax_neg(&distances.iter().map(|(_, d)| *d).collect::<Vec<_>>());
        let scores = distances
            .iter()
            .zip(probs)
            .map(|((c, _), p)| (*c, p))
            .collect();
        let mut ranked = distances;
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Self {
            winner: ranked[0].0,
            ranked,
            scores,
        }
    }

    /// Fused prediction from averaged scores. The ranked "distance" is
    /// `-ln(score)`, which orders classes exactly as the scores do.
    fn from_scores(scores: Vec<(u32, f64)>) -> Self {
        let mut order = scores.clone();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let ranked: Vec<(u32, f64)> = order.into_iter().map(|(c, s)| (c, -s.ln())).collect();
        Self {
            winner: ranked[0].0,
            ranked,
            scores,
        }
    }
}

/// Softmax over negated distances, shifted by the minimum for stability.
pub fn softmax_neg(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = distances.iter().map(|d| (-(d - min)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl PreparedClassifier {
    pub(super) fn build(store: &PrototypeStore) -> Result<Self, EngineError> {
        if store.is_empty() {
            return Err(EngineError::EmptyStore);
        }
        let params = *store.config();
        params.validate()?;
        let protos: Vec<_> = store.iter().collect();
        let built = par::map(&protos, |p| {
            let cov = p.moments.covariance();
            let shrunk = linalg::shrink(&cov, params.gamma1, params.gamma2);
            let normalized = linalg::normalize_corr(&shrunk, params.epsilon)
                .map_err(|source| EngineError::Numeric { key: p.key, source })?;
            let inverse = linalg::invert_spd(&normalized).map_err(|source| match source {
                LinalgError::Singular { .. } => EngineError::Singular { key: p.key, source },
                source => EngineError::Numeric { key: p.key, source },
            })?;
            Ok::<_, EngineError>((
                p.key,
                PreparedClass {
                    class: p.key.class,
                    mean: p.moments.mean().to_vec(),
                    inverse,
                },
            ))
        });
        let mut domains: BTreeMap<u16, Vec<PreparedClass>> = BTreeMap::new();
        for entry in built {
            let (key, prepared) = entry?;
            domains.entry(key.domain).or_default().push(prepared);
        }
        Ok(Self {
            generation: store.generation(),
            params,
            domains,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn params(&self) -> &EngineConfig {
        &self.params
    }

    pub fn domains(&self) -> impl Iterator<Item = u16> + '_ {
        self.domains.keys().copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = ClassKey> + '_ {
        self.domains
            .iter()
            .flat_map(|(d, cs)| cs.iter().map(move |c| ClassKey::new(*d, c.class)))
    }

    pub fn classes(&self, domain: u16) -> Vec<u32> {
        self.domains
            .get(&domain)
            .map(|cs| cs.iter().map(|c| c.class).collect())
            .unwrap_or_default()
    }

    pub fn class(&self, key: ClassKey) -> Option<&PreparedClass> {
        self.domains
            .get(&key.domain)?
            .iter()
            .find(|c| c.class == key.class)
    }

    fn domain(&self, domain: u16) -> Result<&[PreparedClass], EngineError> {
        self.domains
            .get(&domain)
            .map(Vec::as_slice)
            .ok_or(EngineError::UnknownDomain(domain))
    }

    /// Squared Mahalanobis distance to every class of `domain`, in class order.
    pub fn distances(&self, domain: u16, x: &[f64]) -> Result<Vec<(u32, f64)>, EngineError> {
        self.domain(domain)?
            .iter()
            .map(|c| Ok((c.class, linalg::mahalanobis(x, &c.mean, &c.inverse)?)))
            .collect()
    }

    fn distances_within(
        &self,
        domain: u16,
        x: &[f64],
        classes: &[u32],
    ) -> Result<Vec<(u32, f64)>, EngineError> {
        let prepared = self.domain(domain)?;
        let mut wanted: Vec<u32> = classes.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        wanted
            .into_iter()
            .map(|class| {
                let c = prepared
                    .iter()
                    .find(|c| c.class == class)
                    .ok_or(EngineError::UnknownClass { domain, class })?;
                Ok((class, linalg::mahalanobis(x, &c.mean, &c.inverse)?))
            })
            .collect()
    }

    /// Nearest class of `domain` by squared Mahalanobis distance.
    pub fn classify(&self, domain: u16, x: &[f64]) -> Result<Prediction, EngineError> {
        Ok(Prediction::from_distances(self.distances(domain, x)?))
    }

    /// Like [`classify`](Self::classify) but only competing among `classes`.
    pub fn classify_within(
        &self,
        domain: u16,
        x: &[f64],
        classes: &[u32],
    ) -> Result<Prediction, EngineError> {
        if classes.is_empty() {
            return Err(EngineError::NoInputs);
        }
        Ok(Prediction::from_distances(
            self.distances_within(domain, x, classes)?,
        ))
    }

    /// Late fusion: per-domain softmax of negative distances, averaged with
    /// equal weights. All domains must hold the same class set.
    pub fn classify_fused<V: AsRef<[f64]>>(
        &self,
        inputs: &BTreeMap<u16, V>,
    ) -> Result<Prediction, EngineError> {
        let mut iter = inputs.keys();
        let first = *iter.next().ok_or(EngineError::NoInputs)?;
        let classes = self.domain(first).map(|_| self.classes(first))?;
        for &d in iter {
            let other = self.domain(d).map(|_| self.classes(d))?;
            if other != classes {
                return Err(EngineError::Misaligned {
                    left: first,
                    left_classes: classes,
                    right: d,
                    right_classes: other,
                });
            }
        }
        self.fuse(inputs, &classes)
    }

    /// Fusion restricted to `classes`, which every domain must contain.
    pub fn classify_fused_within<V: AsRef<[f64]>>(
        &self,
        inputs: &BTreeMap<u16, V>,
        classes: &[u32],
    ) -> Result<Prediction, EngineError> {
        if inputs.is_empty() || classes.is_empty() {
            return Err(EngineError::NoInputs);
        }
        let mut wanted = classes.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        self.fuse(inputs, &wanted)
    }

    fn fuse<V: AsRef<[f64]>>(
        &self,
        inputs: &BTreeMap<u16, V>,
        classes: &[u32],
    ) -> Result<Prediction, EngineError> {
        let mut averaged = vec![0.0; classes.len()];
        for (&domain, x) in inputs {
            let distances = self.distances_within(domain, x.as_ref(), classes)?;
            let probs = softmax_neg(&distances.iter().map(|(_, d)| *d).collect::<Vec<_>>());
            for (acc, p) in averaged.iter_mut().zip(probs) {
                *acc += p;
            }
        }
        let n = inputs.len() as f64;
        let scores = classes
            .iter()
            .zip(averaged)
            .map(|(c, s)| (*c, s / n))
            .collect();
        Ok(Prediction::from_scores(scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two classes whose prepared inverse is exactly the identity: samples at
    /// mean ± e_i along each axis give a diagonal covariance with equal
    /// variances, which correlation normalization maps to I (ε aside).
    fn axis_cloud(center: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..center.len() {
            for s in [-1.0, 1.0] {
                let mut v = center.to_vec();
                v[i] += s;
                out.push(v);
            }
        }
        out
    }

    fn identity_store(centers: &[(u32, Vec<f64>)]) -> PrototypeStore {
        let mut store = PrototypeStore::new(EngineConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            epsilon: 1e-12,
            ..EngineConfig::default()
        });
        for (class, c) in centers {
            store
                .observe_batch(ClassKey::new(0, *class), 0, &axis_cloud(c))
                .unwrap();
        }
        store
    }

    #[test]
    fn nearest_mean_with_identity_covariance() {
        let store = identity_store(&[(0, vec![0.0, 0.0]), (1, vec![10.0, 0.0])]);
        let prepared = store.prepare().unwrap();
        let p = prepared.classify(0, &[1.0, 0.0]).unwrap();
        assert_eq!(p.winner, 0);
        assert_relative_eq!(p.ranked[0].1, 1.0, epsilon = 1e-9);
        assert_relative_eq!(p.ranked[1].1, 81.0, epsilon = 1e-9);
        let total: f64 = p.scores.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn query_at_mean_has_zero_distance() {
        let store = identity_store(&[(0, vec![0.0, 0.0]), (1, vec![10.0, 0.0])]);
        let prepared = store.prepare().unwrap();
        let p = prepared.classify(0, &[10.0, 0.0]).unwrap();
        assert_eq!(p.winner, 1);
        assert_eq!(p.ranked[0], (1, 0.0));
    }

    #[test]
    fn tie_goes_to_smaller_class_id() {
        let store = identity_store(&[(7, vec![-1.0, 0.0]), (3, vec![1.0, 0.0])]);
        let prepared = store.prepare().unwrap();
        let p = prepared.classify(0, &[0.0, 5.0]).unwrap();
        assert_eq!(p.ranked[0].1, p.ranked[1].1);
        assert_eq!(p.winner, 3);
    }

    #[test]
    fn unknown_domain_rejected() {
        let store = identity_store(&[(0, vec![0.0])]);
        let prepared = store.prepare().unwrap();
        assert_eq!(
            prepared.classify(4, &[0.0]).unwrap_err(),
            EngineError::UnknownDomain(4)
        );
    }

    #[test]
    fn single_sample_class_is_singular() {
        let mut store = PrototypeStore::default();
        store
            .observe_batch(ClassKey::new(0, 2), 0, &[[1.0, 2.0, 3.0]])
            .unwrap();
        match store.prepare() {
            Err(EngineError::Singular { key, .. }) => assert_eq!(key, ClassKey::new(0, 2)),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn rank_deficient_class_rescued_by_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut store = PrototypeStore::default();
        store.observe_batch(ClassKey::new(0, 0), 0, &batch).unwrap();
        let prepared = store.prepare().unwrap();
        let inv = &prepared.class(ClassKey::new(0, 0)).unwrap().inverse;
        assert!(inv.min_pivot() > 0.0);

        store.set_config(EngineConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            ..EngineConfig::default()
        });
        assert!(matches!(store.prepare(), Err(EngineError::Singular { .. })));
    }

    #[test]
    fn unshrunk_inverse_matches_correlation_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<Vec<f64>> = (0..400)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut store = PrototypeStore::new(EngineConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            epsilon: 1e-12,
            ..EngineConfig::default()
        });
        store.observe_batch(ClassKey::new(0, 0), 0, &batch).unwrap();
        let prepared = store.prepare().unwrap();
        let inv = prepared
            .class(ClassKey::new(0, 0))
            .unwrap()
            .inverse
            .matrix()
            .clone();

        // Oracle: sample correlation straight from the definition, inverted by
        // Gauss-Jordan elimination.
        let n = batch.len() as f64;
        let mean: Vec<f64> = (0..4)
            .map(|j| batch.iter().map(|s| s[j]).sum::<f64>() / n)
            .collect();
        let cov = |i: usize, j: usize| {
            batch
                .iter()
                .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                .sum::<f64>()
                / (n - 1.0)
        };
        let mut a: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut row: Vec<f64> = (0..4)
                    .map(|j| cov(i, j) / (cov(i, i).sqrt() * cov(j, j).sqrt()))
                    .collect();
                row.extend((0..4).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..4 {
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for r in 0..4 {
                if r != col {
                    let f = a[r][col];
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        for (i, row) in a.iter().enumerate() {
            for j in 0..4 {
                assert_relative_eq!(
                    inv.get(i, j),
                    row[4 + j],
                    epsilon = 1e-9,
                    max_relative = 1e-9
                );
            }
        }
    }

    #[test]
    fn fused_average_of_scores() {
        // Build two domains with two classes each and check the stated
        // averaging arithmetic through `from_scores`.
        let p = Prediction::from_scores(vec![(0, 0.55), (1, 0.45)]);
        assert_eq!(p.winner, 0);
        let a = [0.9, 0.1];
        let b = [0.2, 0.8];
        let avg: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
        assert_relative_eq!(avg[0], 0.55);
        assert_relative_eq!(avg[1], 0.45);
    }

    fn two_domain_store() -> PrototypeStore {
        let mut store = identity_store(&[(0, vec![0.0, 0.0]), (1, vec![4.0, 0.0])]);
        for (class, c) in [(0u32, [0.0, 0.0, 0.0]), (1, [0.0, 3.0, 0.0])] {
            store
                .observe_batch(ClassKey::new(1, class), 0, &axis_cloud(&c))
                .unwrap();
        }
        store
    }

    #[test]
    fn fused_single_domain_matches_classify() {
        let prepared = two_domain_store().prepare().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..6.0)).collect();
            let inputs = BTreeMap::from([(0u16, x.clone())]);
            assert_eq!(
                prepared.classify_fused(&inputs).unwrap().winner,
                prepared.classify(0, &x).unwrap().winner
            );
        }
    }

    #[test]
    fn fused_follows_domain_with_actual_scores() {
        let prepared = two_domain_store().prepare().unwrap();
        // Domain 0 strongly prefers class 1; domain 1 is ambivalent.
        let inputs: BTreeMap<u16, Vec<f64>> =
            BTreeMap::from([(0, vec![4.0, 0.0]), (1, vec![0.0, 1.5, 0.0])]);
        let d1 = prepared.classify(1, &[0.0, 1.5, 0.0]).unwrap();
        assert_relative_eq!(d1.score_of(0).unwrap(), 0.5, epsilon = 1e-6);
        let fused = prepared.classify_fused(&inputs).unwrap();
        assert_eq!(fused.winner, 1);
        let total: f64 = fused.scores.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fused_rejects_misaligned_classes() {
        let mut store = two_domain_store();
        store
            .observe_batch(ClassKey::new(1, 5), 0, &axis_cloud(&[9.0, 9.0, 9.0]))
            .unwrap();
        let prepared = store.prepare().unwrap();
        let inputs: BTreeMap<u16, Vec<f64>> =
            BTreeMap::from([(0, vec![0.0, 0.0]), (1, vec![0.0, 0.0, 0.0])]);
        assert!(matches!(
            prepared.classify_fused(&inputs),
            Err(EngineError::Misaligned { .. })
        ));
        // Restricting to the common classes works.
        let p = prepared.classify_fused_within(&inputs, &[0, 1]).unwrap();
        assert_eq!(p.winner, 0);
    }

    #[test]
    fn stale_detection() {
        let mut store = two_domain_store();
        let prepared = store.prepare().unwrap();
        store.ensure_fresh(&prepared).unwrap();
        store
            .observe_batch(ClassKey::new(0, 0), 1, &[[0.5, 0.5]])
            .unwrap();
        assert!(matches!(
            store.ensure_fresh(&prepared),
            Err(EngineError::Stale { .. })
        ));
    }

    proptest! {
        #[test]
        fn scores_form_a_distribution(d in prop::collection::vec(0.0f64..1e4, 1..20)) {
            let s = softmax_neg(&d);
            prop_assert!(s.iter().all(|v| *v >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn identical_domain_scores_keep_argmax(x in prop::collection::vec(-3.0f64..7.0, 2)) {
            // Domain 1 is an exact copy of domain 0, so both produce the same
            // score vector for the same input.
            let mut store = identity_store(&[(0, vec![0.0, 0.0]), (1, vec![4.0, 1.0]), (2, vec![1.0, 5.0])]);
            for class in 0..3u32 {
                let proto = store.get(&ClassKey::new(0, class)).unwrap().clone();
                store.insert_prototype(crate::engine::Prototype {
                    key: ClassKey::new(1, class),
                    ..proto
                }).unwrap();
            }
            let prepared = store.prepare().unwrap();
            let single = prepared.classify(0, &x).unwrap();
            let inputs = BTreeMap::from([(0u16, x.clone()), (1u16, x.clone())]);
            let fused = prepared.classify_fused(&inputs).unwrap();
            let argmax = single
                .scores
                .iter()
                .fold((u32::MAX, f64::NEG_INFINITY), |best, (c, s)| if *s > best.1 { (*c, *s) } else { best })
                .0;
            prop_assert_eq!(fused.winner, argmax);
            for ((_, a), (_, b)) in fused.scores.iter().zip(&single.scores) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
