use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{GimError, Result};
use crate::tensor::Tensor;

/// Lower Cholesky factor of a symmetric positive-definite 2×2 matrix.
fn cholesky2(c: &[[f64; 2]; 2], class: usize) -> Result<[[f64; 2]; 2]> {
    let scale = c[0][0].abs().max(c[1][1].abs()).max(1e-300);
    if c.iter().flatten().any(|v| !v.is_finite()) || (c[0][1] - c[1][0]).abs() > 1e-12 * scale {
        return Err(GimError::Contract(format!("covariance of class {class} is not symmetric")));
    }
    let a = c[0][0];
    let det = a * c[1][1] - c[0][1] * c[1][0];
    if !(a > 0.0 && det > 0.0) {
        return Err(GimError::Contract(format!(
            "covariance of class {class} is not positive-definite"
        )));
    }
    let l00 = a.sqrt();
    let l10 = c[1][0] / l00;
    Ok([[l00, 0.0], [l10, (det / a).sqrt()]])
}

/// `n_per_class` draws from each 2-D Gaussian, labelled by component.
pub fn synth_gaussian_scene(
    class_means: &[[f64; 2]],
    class_covs: &[[[f64; 2]; 2]],
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if class_means.len() != class_covs.len() {
        return Err(GimError::Contract(format!(
            "{} means but {} covariances",
            class_means.len(),
            class_covs.len()
        )));
    }
    if class_means.is_empty() || n_per_class == 0 {
        return Err(GimError::Contract("scene needs at least one class and sample".into()));
    }
    let factors = class_covs
        .iter()
        .enumerate()
        .map(|(k, c)| cholesky2(c, k))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n_per_class * class_means.len());
    let mut labels = Vec::with_capacity(n_per_class * class_means.len());
    for (k, (m, l)) in class_means.iter().zip(&factors).enumerate() {
        for _ in 0..n_per_class {
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            data.push(m[0] + l[0][0] * e0);
            data.push(m[1] + l[1][0] * e0 + l[1][1] * e1);
            labels.push(k);
        }
    }
    let features = Tensor::matrix(labels.len(), 2, data)?;
    Dataset::new(features, labels, class_means.len(), "gaussian-scene")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Normal(0.5, 1) per pixel, clipped into `[0, 1]`.
    Gaussian,
    /// Uniform on `[0, 1]` per pixel.
    Uniform,
}

/// `n` flattened `width × height` noise images, all labelled 0.
pub fn noise_dataset(kind: NoiseKind, n: usize, width: usize, height: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || width == 0 || height == 0 {
        return Err(GimError::Contract("noise dataset extents must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = width * height;
    let data: Vec<f64> = match kind {
        NoiseKind::Gaussian => (0..n * p)
            .map(|_| (0.5 + rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
            .collect(),
        NoiseKind::Uniform => (0..n * p).map(|_| rng.random::<f64>()).collect(),
    };
    let name = match kind {
        NoiseKind::Gaussian => "gaussian-noise",
        NoiseKind::Uniform => "uniform-noise",
    };
    Dataset::new(Tensor::matrix(n, p, data)?, vec![0; n], 1, name)
}
