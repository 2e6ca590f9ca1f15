//! Raw row-major matrix kernels. Every `gemm_*` accumulates into `out`.

use crate::tensor::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], out_row);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            axpy(api, b_row, &mut out[i * n..(i + 1) * n]);
        }
    }
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// In-place numerically stable softmax over each row of length `cols`.
pub fn softmax_rows_inplace<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (3, 11, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut nn = vec![0.0; m * n];
        gemm_nn(&a, &b, m, k, n, &mut nn);

        let mut bt = vec![0.0; n * k];
        transpose(&b, k, n, &mut bt);
        let mut nt = vec![0.0; m * n];
        gemm_nt(&a, &bt, m, k, n, &mut nt);

        let mut at = vec![0.0; k * m];
        transpose(&a, m, k, &mut at);
        let mut tn = vec![0.0; m * n];
        gemm_tn(&at, &b, m, k, n, &mut tn);

        for i in 0..m * n {
            assert!((nn[i] - want[i]).abs() < 1e-12);
            assert!((nt[i] - want[i]).abs() < 1e-12);
            assert!((tn[i] - want[i]).abs() < 1e-12);
        }
    }
}
