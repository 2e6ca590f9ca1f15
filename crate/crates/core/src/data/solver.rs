//! Five-point finite-volume solver for `-div(a grad u) = f` on the unit
//! square with `u = 0` on the boundary.
//!
//! Nodes sit on a uniform `n×n` grid that includes the boundary, spacing
//! `h = 1/(n-1)`. Only interior nodes are unknowns. The flux between two
//! neighbouring nodes uses the harmonic mean of their coefficients, which
//! keeps fluxes continuous across jumps in `a`. The resulting matrix is a
//! symmetric M-matrix and is solved matrix-free by conjugate gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative residual the conjugate-gradient loop stops at.
pub const CG_TOLERANCE: f64 = 1e-10;

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Face coefficients of the interior operator, precomputed once per solve.
struct Operator {
    n: usize,
    inv_h2: f64,
    // east face of node (r, c) couples it with (r, c+1); south with (r+1, c)
    east: Vec<f64>,
    south: Vec<f64>,
}

impl Operator {
    fn new(a: &[f64], n: usize) -> Self {
        let mut east = vec![0.0; n * n];
        let mut south = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                if c + 1 < n {
                    east[r * n + c] = harmonic(a[r * n + c], a[r * n + c + 1]);
                }
                if r + 1 < n {
                    south[r * n + c] = harmonic(a[r * n + c], a[(r + 1) * n + c]);
                }
            }
        }
        let h = 1.0 / (n - 1) as f64;
        Operator {
            n,
            inv_h2: 1.0 / (h * h),
            east,
            south,
        }
    }

    /// `y = A x` on full-grid vectors; boundary entries of `x` are treated as
    /// zero and boundary entries of `y` are left at zero.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for r in 1..n - 1 {
            for c in 1..n - 1 {
                let i = r * n + c;
                let (kw, ke) = (self.east[i - 1], self.east[i]);
                let (kn, ks) = (self.south[i - n], self.south[i]);
                let at = |j: usize| {
                    let (rr, cc) = (j / n, j % n);
                    if rr == 0 || cc == 0 || rr == n - 1 || cc == n - 1 {
                        0.0
                    } else {
                        x[j]
                    }
                };
                y[i] = self.inv_h2
                    * ((kw + ke + kn + ks) * x[i]
                        - kw * at(i - 1)
                        - ke * at(i + 1)
                        - kn * at(i - n)
                        - ks * at(i + n));
            }
        }
    }
}

fn check_inputs(a: &Tensor<f64>, f: &Tensor<f64>) -> Result<usize> {
    let (n, m) = a.dims2()?;
    if n != m || n < 3 {
        return Err(Error::invalid(
            "solve_darcy_fd",
            format!("need a square grid with n >= 3, got {n}x{m}"),
        ));
    }
    if f.shape() != a.shape() {
        return Err(Error::shape("solve_darcy_fd", a.shape(), f.shape()));
    }
    if let Some(bad) = a.data().iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Solver(format!(
            "coefficient must be positive and finite, found {bad}"
        )));
    }
    Ok(n)
}

fn interior_norm(v: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for r in 1..n - 1 {
        for c in 1..n - 1 {
            s += v[r * n + c] * v[r * n + c];
        }
    }
    s.sqrt()
}

/// Solves for `u` given coefficient `a > 0` and forcing `f`, both `n×n`.
/// Boundary values of `f` are ignored; boundary values of `u` are exactly 0.
pub fn solve_darcy_fd(a: &Tensor<f64>, f: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = check_inputs(a, f)?;
    let op = Operator::new(a.data(), n);
    let mut b = f.data().to_vec();
    for r in 0..n {
        for c in 0..n {
            if r == 0 || c == 0 || r == n - 1 || c == n - 1 {
                b[r * n + c] = 0.0;
            }
        }
    }
    let b_norm = interior_norm(&b, n);
    let mut u = vec![0.0; n * n];
    if b_norm == 0.0 {
        return Tensor::new([n, n], u);
    }

    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n * n];
    let mut rr = r.iter().map(|v| v * v).sum::<f64>();
    let max_iter = 10 * n * n;
    for _ in 0..max_iter {
        if rr.sqrt() <= CG_TOLERANCE * b_norm {
            return Tensor::new([n, n], u);
        }
        op.apply(&p, &mut ap);
        let alpha = rr / p.iter().zip(&ap).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..n * n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = r.iter().map(|v| v * v).sum::<f64>();
        let beta = rr_new / rr;
        for i in 0..n * n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    if rr.sqrt() <= CG_TOLERANCE * b_norm {
        return Tensor::new([n, n], u);
    }
    Err(Error::Solver(format!(
        "conjugate gradients did not reach relative residual {CG_TOLERANCE:e} within {max_iter} iterations (at {:e})",
        rr.sqrt() / b_norm
    )))
}

/// `‖A u − f‖ / ‖f‖` over interior nodes (absolute when `f` vanishes).
pub fn darcy_residual(a: &Tensor<f64>, u: &Tensor<f64>, f: &Tensor<f64>) -> Result<f64> {
    let n = check_inputs(a, f)?;
    if u.shape() != a.shape() {
        return Err(Error::shape("darcy_residual", a.shape(), u.shape()));
    }
    let op = Operator::new(a.data(), n);
    let mut au = vec![0.0; n * n];
    op.apply(u.data(), &mut au);
    let diff: Vec<f64> = au.iter().zip(f.data()).map(|(x, y)| x - y).collect();
    let f_norm = interior_norm(f.data(), n);
    let res = interior_norm(&diff, n);
    Ok(if f_norm > 0.0 { res / f_norm } else { res })
}

/// Samples `g(x, y)` at the grid nodes, `x` along rows and `y` along columns.
pub fn grid_field(n: usize, g: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let h = 1.0 / (n - 1) as f64;
    let data = (0..n * n)
        .map(|i| g((i / n) as f64 * h, (i % n) as f64 * h))
        .collect();
    Tensor::from_parts(vec![n, n], data)
}
