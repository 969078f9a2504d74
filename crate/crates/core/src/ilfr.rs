//! Intra-layer feature representation: pool the trailing `k` tapped layers
//! to fixed lengths, concatenate them (earlier layer first) and optionally
//! range-normalize the result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{minmax01, FVec, LinalgError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IlfrError {
    #[error("need at least {k} layers, sample has {found}")]
    TooFewLayers { k: usize, found: usize },
    #[error("invalid ILFR configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Features tapped from the layers of one extractor, earliest layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    layers: Vec<FVec>,
    layer_ids: Vec<u16>,
}

impl LayerFeatures {
    pub fn new(layers: Vec<FVec>) -> Result<Self, IlfrError> {
        let ids = (0..layers.len() as u16).collect();
        Self::with_ids(layers, ids)
    }

    pub fn with_ids(layers: Vec<FVec>, layer_ids: Vec<u16>) -> Result<Self, IlfrError> {
        if layers.is_empty() {
            return Err(IlfrError::TooFewLayers { k: 1, found: 0 });
        }
        if layer_ids.len() != layers.len() {
            return Err(IlfrError::InvalidConfig(format!(
                "{} layer ids for {} layers",
                layer_ids.len(),
                layers.len()
            )));
        }
        Ok(Self { layers, layer_ids })
    }

    pub fn layers(&self) -> &[FVec] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FVec] {
        &mut self.layers
    }

    pub fn layer_ids(&self) -> &[u16] {
        &self.layer_ids
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(FVec::dim).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlfrConfig {
    /// Number of trailing layers used.
    pub k: usize,
    /// Output length for each of the `k` layers, earliest first.
    pub target_dims: Vec<usize>,
    pub normalize: bool,
    /// Range-normalize each pooled layer instead of the concatenation.
    #[serde(default)]
    pub per_layer_normalize: bool,
}

impl IlfrConfig {
    pub fn new(target_dims: Vec<usize>, normalize: bool) -> Self {
        Self {
            k: target_dims.len(),
            target_dims,
            normalize,
            per_layer_normalize: false,
        }
    }

    pub fn validate(&self) -> Result<(), IlfrError> {
        if self.k == 0 {
            return Err(IlfrError::InvalidConfig("k must be at least 1".into()));
        }
        if self.target_dims.len() != self.k {
            return Err(IlfrError::InvalidConfig(format!(
                "k = {} but {} target dims given",
                self.k,
                self.target_dims.len()
            )));
        }
        if self.target_dims.contains(&0) {
            return Err(IlfrError::InvalidConfig(
                "target dims must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Length of every representation this configuration produces.
    pub fn output_dim(&self) -> usize {
        self.target_dims.iter().sum()
    }
}

/// Average-pools `v` into `target_dim` contiguous chunks (boundaries at
/// `floor(j * dim / target_dim)`), or repeats entries by nearest index when
/// upsampling.
pub fn standardize_layer(v: &[f64], target_dim: usize) -> Vec<f64> {
    let dim = v.len();
    assert!(dim > 0 && target_dim > 0, "dimensions must be positive");
    if target_dim == dim {
        return v.to_vec();
    }
    if target_dim > dim {
        return (0..target_dim).map(|j| v[j * dim / target_dim]).collect();
    }
    (0..target_dim)
        .map(|j| {
            let lo = j * dim / target_dim;
            let hi = (j + 1) * dim / target_dim;
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn build_representation(lf: &LayerFeatures, cfg: &IlfrConfig) -> Result<FVec, IlfrError> {
    cfg.validate()?;
    let layers = lf.layers();
    if layers.len() < cfg.k {
        return Err(IlfrError::TooFewLayers {
            k: cfg.k,
            found: layers.len(),
        });
    }
    let mut out = Vec::with_capacity(cfg.output_dim());
    for (layer, &target) in layers[layers.len() - cfg.k..].iter().zip(&cfg.target_dims) {
        let pooled = standardize_layer(layer, target);
        if cfg.normalize && cfg.per_layer_normalize {
            out.extend(minmax01(&pooled));
        } else {
            out.extend(pooled);
        }
    }
    if cfg.normalize && !cfg.per_layer_normalize {
        out = minmax01(&out);
    }
    Ok(FVec::new(out)?)
}
