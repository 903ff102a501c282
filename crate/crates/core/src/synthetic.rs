//! Gaussian embedding datasets for smoke runs and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episodes::EmbeddingDataset;
use crate::error::{Error, Result};

/// Class `c` has mean `offset + μ_c`. On the first `nuisance_dims` coordinates
/// `μ_c = 0` and samples add noise with std `nuisance_std`; on the rest
/// `μ_c ~ N(0, center_std²)` and the noise std is `noise_std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_std: f64,
    pub noise_std: f64,
    pub nuisance_dims: usize,
    pub nuisance_std: f64,
    pub offset: f64,
    pub seed: u64,
}

impl GaussianSpec {
    pub fn isotropic(classes: usize, per_class: usize, dim: usize, center_std: f64, noise_std: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            dim,
            center_std,
            noise_std,
            nuisance_dims: 0,
            nuisance_std: noise_std,
            offset: 0.0,
            seed,
        }
    }
}

pub fn gaussian_dataset(spec: &GaussianSpec) -> Result<EmbeddingDataset> {
    if spec.nuisance_dims > spec.dim {
        return Err(Error::Config(format!(
            "{} nuisance dims exceed dim {}",
            spec.nuisance_dims, spec.dim
        )));
    }
    let bad = |what: &str| Error::Config(format!("{what} must be finite and non-negative"));
    let center = Normal::new(0.0, spec.center_std).map_err(|_| bad("center_std"))?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|_| bad("noise_std"))?;
    let nuisance = Normal::new(0.0, spec.nuisance_std).map_err(|_| bad("nuisance_std"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = (0..spec.classes)
        .map(|c| {
            let mean: Vec<f64> = (0..spec.dim)
                .map(|j| {
                    let c = center.sample(&mut rng);
                    spec.offset + if j < spec.nuisance_dims { 0.0 } else { c }
                })
                .collect();
            let mut data = Vec::with_capacity(spec.per_class * spec.dim);
            for _ in 0..spec.per_class {
                for (j, &m) in mean.iter().enumerate() {
                    let e = if j < spec.nuisance_dims {
                        nuisance.sample(&mut rng)
                    } else {
                        noise.sample(&mut rng)
                    };
                    data.push((m + e) as f32);
                }
            }
            (format!("class_{c:03}"), data)
        })
        .collect();
    EmbeddingDataset::new(spec.dim, classes)
}
