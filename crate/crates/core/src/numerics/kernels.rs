//! Hot inner loops shared by the value tensors and the tape. All kernels use
//! the i-k-j ordering with contiguous row accumulation: it vectorizes well and
//! fixes the summation order, which keeps runs bit-reproducible.

use super::scalar::Scalar;

/// c = a·b (or c += a·b when `accumulate`), a: m×k, b: k×n, all row-major.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// c = a·bᵀ (or +=), a: m×k, b: n×k — i.e. contract over the trailing axes.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            if accumulate {
                c_row[j] += acc;
            } else {
                c_row[j] = acc;
            }
        }
    }
}

/// c = aᵀ·b (or +=), a: k×m, b: k×n.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a_row[i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_pi * b_row[j];
            }
        }
    }
}

/// Geometry of one conv application; shared by im2col and its adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    /// Shape of the unrolled patch matrix: (channels·kernel², out_h·out_w).
    pub fn col_shape(&self) -> (usize, usize) {
        (
            self.channels * self.kernel * self.kernel,
            self.out_h() * self.out_w(),
        )
    }
}

/// Unroll image patches into columns so convolution becomes one matmul.
/// `src` is (channels, h·w) row-major; `dst` is col_shape row-major.
pub fn im2col<T: Scalar>(src: &[T], dst: &mut [T], g: ConvGeom) {
    let (rows, cols) = g.col_shape();
    debug_assert_eq!(src.len(), g.channels * g.h * g.w);
    debug_assert_eq!(dst.len(), rows * cols);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut r = 0;
    for c in 0..g.channels {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst_row = &mut dst[r * cols..(r + 1) * cols];
                let mut idx = 0;
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst_row[idx] = if y >= 0 && (y as usize) < g.h && x >= 0 && (x as usize) < g.w
                        {
                            plane[y as usize * g.w + x as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add column gradients back onto the image grid.
pub fn col2im_acc<T: Scalar>(src: &[T], dst: &mut [T], g: ConvGeom) {
    let (rows, cols) = g.col_shape();
    debug_assert_eq!(dst.len(), g.channels * g.h * g.w);
    debug_assert_eq!(src.len(), rows * cols);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut r = 0;
    for c in 0..g.channels {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src_row = &src[r * cols..(r + 1) * cols];
                let mut idx = 0;
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if y >= 0 && (y as usize) < g.h && x >= 0 && (x as usize) < g.w {
                            plane[y as usize * g.w + x as usize] += src_row[idx];
                        }
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Nearest-neighbour 2× upsample of a (channels, h·w) plane stack.
pub fn upsample2<T: Scalar>(src: &[T], dst: &mut [T], channels: usize, h: usize, w: usize) {
    debug_assert_eq!(src.len(), channels * h * w);
    debug_assert_eq!(dst.len(), channels * 4 * h * w);
    let (oh, ow) = (2 * h, 2 * w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let out = &mut dst[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                out[oy * ow + ox] = row[ox / 2];
            }
        }
    }
}

/// Adjoint of `upsample2`: each source cell accumulates its four children.
pub fn upsample2_adjoint_acc<T: Scalar>(src: &[T], dst: &mut [T], channels: usize, h: usize, w: usize) {
    debug_assert_eq!(dst.len(), channels * h * w);
    debug_assert_eq!(src.len(), channels * 4 * h * w);
    let (oh, ow) = (2 * h, 2 * w);
    for c in 0..channels {
        let grad = &src[c * oh * ow..(c + 1) * oh * ow];
        let out = &mut dst[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                out[(oy / 2) * w + ox / 2] += grad[oy * ow + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2×3, b: 3×2 — compare nn against nt/tn applied to transposes.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c_nn = [0.0f64; 4];
        gemm_nn(&a, &b, &mut c_nn, 2, 3, 2, false);

        // bᵀ is 2×3
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c_nt = [0.0f64; 4];
        gemm_nt(&a, &bt, &mut c_nt, 2, 3, 2, false);
        assert_eq!(c_nn, c_nt);

        // aᵀ is 3×2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = [0.0f64; 4];
        gemm_tn(&at, &b, &mut c_tn, 2, 3, 2, false);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn im2col_matches_direct_conv() {
        // 1 channel 4×4, 3×3 kernel, stride 1, pad 1: conv via im2col+gemm
        // must equal the direct nested-loop convolution.
        let g = ConvGeom { channels: 1, h: 4, w: 4, kernel: 3, stride: 1, pad: 1 };
        let src: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 2.0).collect();
        let kernel: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.1).collect();

        let (rows, cols) = g.col_shape();
        let mut col = vec![0.0f64; rows * cols];
        im2col(&src, &mut col, g);
        let mut out = vec![0.0f64; cols];
        gemm_nn(&kernel, &col, &mut out, 1, rows, cols, false);

        for oy in 0..4usize {
            for ox in 0..4usize {
                let mut acc = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let y = oy as isize + ky as isize - 1;
                        let x = ox as isize + kx as isize - 1;
                        if (0..4).contains(&y) && (0..4).contains(&x) {
                            acc += kernel[ky * 3 + kx] * src[y as usize * 4 + x as usize];
                        }
                    }
                }
                assert!((acc - out[oy * 4 + ox]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_geometry() {
        let g = ConvGeom { channels: 2, h: 16, w: 16, kernel: 3, stride: 2, pad: 1 };
        assert_eq!((g.out_h(), g.out_w()), (8, 8));
    }

    #[test]
    fn im2col_adjoint_is_transpose() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y: the adjoint pair
        // property that makes the conv backward correct.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeom { channels: 3, h: 5, w: 4, kernel: 3, stride: 2, pad: 1 };
        let (rows, cols) = g.col_shape();
        let x: Vec<f64> = (0..g.channels * g.h * g.w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut fx = vec![0.0; rows * cols];
        im2col(&x, &mut fx, g);
        let mut fty = vec![0.0; x.len()];
        col2im_acc(&y, &mut fty, g);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (c, h, w) = (2usize, 3usize, 5usize);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..c * 4 * h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut fx = vec![0.0; y.len()];
        upsample2(&x, &mut fx, c, h, w);
        let mut fty = vec![0.0; x.len()];
        upsample2_adjoint_acc(&y, &mut fty, c, h, w);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
