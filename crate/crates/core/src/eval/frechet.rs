//! Fréchet feature distance between two image sets, measured in the
//! probe's penultimate feature space: ‖μ₁−μ₂‖² + tr(Σ₁+Σ₂−2·(Σ₁Σ₂)^½).
//! The cross term is evaluated through the symmetric similarity
//! (Σ₁^½ Σ₂ Σ₁^½), which shares its spectrum with Σ₁Σ₂ but stays in
//! PSD territory where the square root is defined.

use super::{EvalError, ProbeClassifier, Result};
use crate::numerics::{matrix_sqrt_psd, Tensor};

/// Ridge added to covariance diagonals: feature dimension is comparable to
/// sample counts here, so raw covariances are routinely singular.
const SHRINKAGE: f64 = 1e-6;

fn mean_and_cov(rows: &[Vec<f64>], d: usize) -> (Vec<f64>, Tensor<f64>) {
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in rows {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for v in &mut cov {
        *v /= (n - 1) as f64;
    }
    for i in 0..d {
        cov[i * d + i] += SHRINKAGE;
    }
    (mean, Tensor::new(&[d, d], cov).expect("square covariance"))
}

fn trace(m: &Tensor<f64>) -> f64 {
    let d = m.shape()[0];
    (0..d).map(|i| m.data()[i * d + i]).sum()
}

/// Multiplication chains of symmetric factors pick up roundoff-level
/// asymmetry; fold it back before the eigensolver's symmetry check.
fn symmetrize(m: &mut Tensor<f64>) {
    let d = m.shape()[0];
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m.data()[i * d + j] + m.data()[j * d + i]);
            m.data_mut()[i * d + j] = avg;
            m.data_mut()[j * d + i] = avg;
        }
    }
}

/// Distance between two feature clouds, rows as samples. Needs at least
/// two rows per side for the unbiased covariance.
pub fn ffd_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::Contract(format!(
            "feature distance needs at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if d == 0 {
        return Err(EvalError::Contract("feature vectors are empty".into()));
    }
    for row in a.iter().chain(b) {
        if row.len() != d {
            return Err(EvalError::Contract(format!(
                "feature widths disagree: expected {d}, found {}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Contract("non-finite feature value".into()));
        }
    }

    let (mu1, sigma1) = mean_and_cov(a, d);
    let (mu2, sigma2) = mean_and_cov(b, d);
    let mean_sq: f64 = mu1.iter().zip(&mu2).map(|(x, y)| (x - y) * (x - y)).sum();

    let root1 = matrix_sqrt_psd(&sigma1)?;
    let mut inner = root1.matmul(&sigma2)?.matmul(&root1)?;
    symmetrize(&mut inner);
    let cross = matrix_sqrt_psd(&inner)?;

    let ffd = mean_sq + trace(&sigma1) + trace(&sigma2) - 2.0 * trace(&cross);
    // Exact-zero cases legitimately land a hair below zero in floating point.
    Ok(ffd.max(0.0))
}

/// Distance between two sets of raw [0,1] images in probe feature space.
pub fn frechet_feature_distance(
    probe: &ProbeClassifier,
    gen_images: &[Tensor<f32>],
    ref_images: &[Tensor<f32>],
) -> Result<f64> {
    let features = |images: &[Tensor<f32>]| -> Result<Vec<Vec<f64>>> {
        images.iter().map(|img| probe.features(img)).collect()
    };
    ffd_from_features(&features(gen_images)?, &features(ref_images)?)
}
