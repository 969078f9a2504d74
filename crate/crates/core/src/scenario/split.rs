use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Dataset, ScenarioError, Split};

const SPLIT_TAG: u64 = 0x5e1f;
const HOLDOUT_TAG: u64 = 0x401d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslProtocol {
    /// Every training sample is labeled.
    #[default]
    None,
    /// A uniform per-class fraction of training samples stays labeled.
    RandomImages,
    /// One object instance per class is held out as unlabeled data.
    UnseenObjects,
}

impl std::str::FromStr for SslProtocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SslProtocol::None),
            "random_images" => Ok(SslProtocol::RandomImages),
            "unseen_objects" => Ok(SslProtocol::UnseenObjects),
            other => Err(format!(
                "unknown protocol {other:?} (expected none, random_images or unseen_objects)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
}

/// Assigns every sample a role. Test samples keep [`Role::Test`]; training
/// samples are split per (domain, class). Random draws are seeded by class
/// only, so domains with equal per-class counts get aligned splits.
pub fn split_ssl(
    dataset: &Dataset,
    protocol: SslProtocol,
    labeled_fraction: f64,
    seed: u64,
) -> Result<Vec<Role>, ScenarioError> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(ScenarioError::InvalidSpec(format!(
            "labeled fraction must be in (0, 1], got {labeled_fraction}"
        )));
    }
    let mut roles: Vec<Role> = dataset
        .samples
        .iter()
        .map(|s| match s.split {
            Split::Train => Role::Labeled,
            Split::Test => Role::Test,
        })
        .collect();
    if protocol == SslProtocol::None {
        return Ok(roles);
    }
    for ((domain, class), idx) in train_groups(dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SPLIT_TAG, class as u64]));
        match protocol {
            SslProtocol::RandomImages => {
                let n = idx.len();
                let labeled = ((labeled_fraction * n as f64).round() as usize).clamp(1, n);
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for &i in &order[labeled..] {
                    roles[idx[i]] = Role::Unlabeled;
                }
            }
            SslProtocol::UnseenObjects => {
                let objects: BTreeSet<u32> =
                    idx.iter().map(|&i| dataset.samples[i].object).collect();
                if objects.len() < 2 {
                    return Err(ScenarioError::TooFewObjects {
                        domain,
                        class,
                        found: objects.len(),
                    });
                }
                let objects: Vec<u32> = objects.into_iter().collect();
                let held = *objects.choose(&mut rng).expect("non-empty");
                for &i in &idx {
                    if dataset.samples[i].object == held {
                        roles[i] = Role::Unlabeled;
                    }
                }
            }
            SslProtocol::None => unreachable!(),
        }
    }
    Ok(roles)
}

fn train_groups(dataset: &Dataset) -> BTreeMap<(u16, u32), Vec<usize>> {
    let mut groups: BTreeMap<(u16, u32), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.split == Split::Train {
            groups.entry((s.domain, s.class)).or_default().push(i);
        }
    }
    groups
}

/// Builds a validation dataset: a per-class `fraction` of training samples
/// becomes the test split, the rest stays for training, and the original
/// test samples are dropped.
pub fn holdout_validation(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<Dataset, ScenarioError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ScenarioError::InvalidSpec(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut held = vec![false; dataset.samples.len()];
    for ((domain, class), idx) in train_groups(dataset) {
        let n = idx.len();
        if n < 2 {
            return Err(ScenarioError::InvalidSpec(format!(
                "domain {domain} class {class} has {n} training samples; cannot hold out validation data"
            )));
        }
        let take = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[HOLDOUT_TAG, class as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        // Keep the held-out samples in dataset order so cross-domain pairing
        // by within-class index still lines up.
        let mut chosen: Vec<usize> = order[..take].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            held[idx[i]] = true;
        }
    }
    let samples = dataset
        .samples
        .iter()
        .zip(&held)
        .filter(|(s, _)| s.split == Split::Train)
        .map(|(s, &h)| {
            let mut s = s.clone();
            if h {
                s.split = Split::Test;
            }
            s
        })
        .collect();
    Ok(Dataset {
        manifest: dataset.manifest.clone(),
        samples,
    })
}
