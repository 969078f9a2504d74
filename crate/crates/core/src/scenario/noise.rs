use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ScenarioError;
use crate::ilfr::LayerFeatures;
use crate::linalg::FVec;

/// Adds i.i.d. N(0, sigma^2) noise to every component of every layer.
pub fn inject_noise(
    batch: &[LayerFeatures],
    sigma: f64,
    seed: u64,
) -> Result<Vec<LayerFeatures>, ScenarioError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ScenarioError::InvalidSpec(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(batch.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(batch
        .iter()
        .map(|lf| {
            let mut out = lf.clone();
            for layer in out.layers_mut() {
                let noisy: Vec<f64> = layer.iter().map(|v| v + normal.sample(&mut rng)).collect();
                *layer = FVec::new(noisy).expect("finite plus finite noise");
            }
            out
        })
        .collect())
}
