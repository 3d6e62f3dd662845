//! Dense kernels shared by the autodiff graph and the inference path.
//!
//! Every kernel iterates in a fixed ascending order, so the two paths produce
//! bit-identical values and results do not depend on caller-side scheduling.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// C = A·B with A n×k, B k×m. ikj loop order; each output element accumulates
/// over k in ascending order.
pub fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A·Bᵀ with A n×k, B m×k. Row-by-row dot products.
pub fn matmul_nt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// C = Aᵀ·B with A k×n, B k×m (used by backward passes).
pub fn matmul_tn(a: &[f64], k: usize, n: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0; n * m];
    for kk in 0..k {
        let arow = &a[kk * n..(kk + 1) * n];
        let brow = &b[kk * m..(kk + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Adds a 1×d bias row to every row of an n×d matrix, in place.
pub fn add_bias_rows(x: &mut [f64], n: usize, d: usize, bias: &[f64]) {
    debug_assert_eq!(x.len(), n * d);
    debug_assert_eq!(bias.len(), d);
    for i in 0..n {
        let row = &mut x[i * d..(i + 1) * d];
        for (v, &b) in row.iter_mut().zip(bias.iter()) {
            *v += b;
        }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * d);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = math::exp(v - max);
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row mean/variance normalization followed by γ/β affine.
/// Returns (output, per-row mean, per-row 1/sqrt(var + eps)) — the caches the
/// backward pass needs.
pub fn layer_norm_rows(
    x: &[f64],
    n: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    debug_assert_eq!(x.len(), n * d);
    debug_assert_eq!(gamma.len(), d);
    debug_assert_eq!(beta.len(), d);
    let mut out = vec![0.0; n * d];
    let mut means = vec![0.0; n];
    let mut inv_stds = vec![0.0; n];
    let dn = d as f64;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= dn;
        let mut var = 0.0;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= dn;
        let inv_std = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
        means[i] = mean;
        inv_stds[i] = inv_std;
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    (out, means, inv_stds)
}

pub fn gelu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| math::gelu(v)).collect()
}

pub fn sigmoid_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| math::sigmoid(v)).collect()
}

/// Symmetric 3×3 eigenvalues via the closed-form trigonometric method.
/// Used by invariant checks (PSD after regularization).
pub fn sym3_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut eig = [m[0][0], m[1][1], m[2][2]];
        eig.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        return eig;
    }
    let d0 = m[0][0] - q;
    let d1 = m[1][1] - q;
    let d2 = m[2][2] - q;
    let p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1;
    let p = math::sqrt(p2 / 6.0);
    let inv_p = 1.0 / p;
    // B = (1/p)(M − qI); r = det(B)/2 clamped to [−1, 1].
    let b = [
        [d0 * inv_p, m[0][1] * inv_p, m[0][2] * inv_p],
        [m[0][1] * inv_p, d1 * inv_p, m[1][2] * inv_p],
        [m[0][2] * inv_p, m[1][2] * inv_p, d2 * inv_p],
    ];
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = libm::acos(r) / 3.0;
    let e1 = q + 2.0 * p * math::cos(phi);
    let e3 = q + 2.0 * p * math::cos(phi + 2.0 * math::PI / 3.0);
    let e2 = 3.0 * q - e1 - e3;
    let mut eig = [e1, e2, e3];
    eig.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

/// Inverse of a symmetric positive-definite 3×3 matrix via the adjugate.
pub fn sym3_inverse(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = inv[0][1];
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = inv[0][2];
    inv[2][1] = inv[1][2];
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        // [[1,2],[3,4]]·[[5],[6]] = [[17],[39]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], 2, 2, &[5.0, 6.0], 1);
        assert_eq!(c, vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 1.0, 2.0, 1.0, 0.0]; // 2x3
        let c = matmul_nt(&a, 2, 3, &b, 2);
        // row0·brow0 = 1+0+3 = 4; row0·brow1 = 2+2+0 = 4
        assert_eq!(c, vec![4.0, 4.0, 10.0, 13.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 2, 3);
        for i in 0..2 {
            let sum: f64 = s[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let gamma = [1.0, 1.0, 1.0, 1.0];
        let beta = [0.0; 4];
        let (y, _, _) = layer_norm_rows(&[1.0, 2.0, 3.0, 4.0], 1, 4, &gamma, &beta);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let eig = sym3_eigenvalues(&[[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(eig, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn sym3_inverse_of_diag() {
        let inv = sym3_inverse(&[[2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 8.0]]).unwrap();
        assert!((inv[0][0] - 0.5).abs() < 1e-15);
        assert!((inv[1][1] - 0.25).abs() < 1e-15);
        assert!((inv[2][2] - 0.125).abs() < 1e-15);
    }
}
