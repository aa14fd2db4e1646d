//! Dense symmetric eigendecomposition via cyclic Jacobi rotations, plus the
//! PSD matrix square root built on it. Matrices here are small (feature-space
//! covariances, ≤ a few dozen rows), where Jacobi is simple, robust, and
//! accurate to near machine precision.

use super::error::{NumericsError, Result};
use super::tensor::Tensor;

const MAX_SWEEPS: usize = 64;

/// Relative asymmetry above this is treated as a caller bug, not noise.
const SYMMETRY_TOL: f64 = 1e-6;

/// Eigendecomposition of a symmetric matrix: `a = V · diag(λ) · Vᵀ`.
/// Returns eigenvalues ascending and the matching eigenvectors as columns.
pub fn sym_eig(a: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    let n = check_square_symmetric(a, "sym_eig")?;
    // Work on the symmetrized copy so roundoff-level asymmetry cannot skew
    // the rotations.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.data()[i * n + j] + a.data()[j * n + i]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = f64::EPSILON * frob * n as f64;

    for _ in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += m[p * n + q] * m[p * n + q];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::EPSILON * frob {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m[i * n + p];
                        let aiq = m[i * n + q];
                        let new_p = aip - s * (aiq + tau * aip);
                        let new_q = aiq + s * (aip - tau * aiq);
                        m[i * n + p] = new_p;
                        m[p * n + i] = new_p;
                        m[i * n + q] = new_q;
                        m[q * n + i] = new_q;
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    // Sort ascending, permuting eigenvector columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[i * n + i]
            .partial_cmp(&m[j * n + j])
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + new_col] = v[i * n + old_col];
        }
    }
    Ok((eigenvalues, Tensor::new(&[n, n], vectors)?))
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Asymmetric input is rejected as a contract violation; eigenvalues that
/// dip below zero from roundoff are clamped to zero.
pub fn matrix_sqrt_psd(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = check_square_symmetric(a, "matrix_sqrt_psd")?;
    let (eigenvalues, vectors) = sym_eig(a)?;
    let scale = eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    for &l in &eigenvalues {
        // Genuinely negative spectra mean the input was not PSD.
        if l < -1e-8 * scale.max(1.0) {
            return Err(NumericsError::contract(format!(
                "matrix_sqrt_psd: negative eigenvalue {l:.3e}"
            )));
        }
    }
    let roots: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // S = V · diag(√λ) · Vᵀ
    let mut out = vec![0.0; n * n];
    let v = vectors.data();
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += v[i * n + k] * roots[k] * v[j * n + k];
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    Tensor::new(&[n, n], out)
}

fn check_square_symmetric(a: &Tensor<f64>, op: &'static str) -> Result<usize> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(NumericsError::dim(op, shape, shape));
    }
    let n = shape[0];
    if !a.is_finite() {
        return Err(NumericsError::non_finite(op));
    }
    let mut asym = 0.0f64;
    let mut magnitude = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a.data()[i * n + j] - a.data()[j * n + i]).abs());
            magnitude = magnitude.max(a.data()[i * n + j].abs());
        }
        magnitude = magnitude.max(a.data()[i * n + i].abs());
    }
    if asym > SYMMETRY_TOL * magnitude.max(1.0) {
        return Err(NumericsError::contract(format!(
            "{op}: input asymmetric by {asym:.3e}"
        )));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::numerics::scalar::Scalar;

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let b = Tensor::<f64>::randn(&[n, n], 1.0, rng);
        let bt = b.transpose2().unwrap();
        bt.matmul(&b).unwrap()
    }

    #[test]
    fn sqrt_of_diagonal_is_elementwise() {
        let a = Tensor::new(&[2, 2], vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let s = matrix_sqrt_psd(&a).unwrap();
        let expect = [2.0, 0.0, 0.0, 3.0];
        for (got, want) in s.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn sqrt_squares_back_to_input_on_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let a = random_psd(5, &mut rng);
            let s = matrix_sqrt_psd(&a).unwrap();
            let ss = s.matmul(&s).unwrap();
            let diff = ss.sub(&a).unwrap().norm();
            let rel = diff / a.norm().max(1e-30);
            assert!(rel < 1e-8, "relative reconstruction error {rel}");
        }
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let a = Tensor::new(&[2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        let err = matrix_sqrt_psd(&a).unwrap_err();
        assert!(err.to_string().contains("asymmetric"));
    }

    #[test]
    fn genuinely_negative_spectrum_is_rejected() {
        let a = Tensor::new(&[2, 2], vec![-1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matrix_sqrt_psd(&a).is_err());
    }

    #[test]
    fn tiny_negative_roundoff_clamps_to_zero() {
        let a = Tensor::new(&[2, 2], vec![-1e-14, 0.0, 0.0, 1.0]).unwrap();
        let s = matrix_sqrt_psd(&a).unwrap();
        assert!(s.data()[0].abs() < 1e-6);
        assert!((s.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigendecomposition_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_psd(6, &mut rng);
            let n = 6;
            let (vals, vecs) = sym_eig(&a).unwrap();
            assert!(vals.windows(2).all(|w| w[0] <= w[1]), "sorted ascending");
            // VᵀV = I
            let vt = vecs.transpose2().unwrap();
            let gram = vt.matmul(&vecs).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram.data()[i * n + j] - want).abs() < 1e-10);
                }
            }
            // V diag(λ) Vᵀ = A
            let mut scaled = vecs.clone();
            for i in 0..n {
                for j in 0..n {
                    scaled.data_mut()[i * n + j] *= vals[j];
                }
            }
            let recon = scaled.matmul(&vt).unwrap();
            let rel = recon.sub(&a).unwrap().norm() / a.norm().max(1e-30);
            assert!(rel < 1e-10, "reconstruction error {rel}");
        }
    }

    #[test]
    fn one_by_one_matrix() {
        let a = Tensor::new(&[1, 1], vec![2.25]).unwrap();
        let s = matrix_sqrt_psd(&a).unwrap();
        assert!((s.data()[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn scalar_trait_round_trips() {
        assert_eq!(<f64 as Scalar>::of(0.5).as_f64(), 0.5);
        assert_eq!(<f32 as Scalar>::of(0.5).as_f64(), 0.5);
    }
}
