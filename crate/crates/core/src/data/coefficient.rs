//! Two-valued random permeability fields and bilinear grid resampling.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const A_LO: f64 = 3.0;
pub const A_HI: f64 = 12.0;

/// One-dimensional moving average with a window clipped at the edges.
fn box_blur_line(src: &[f64], radius: usize, out: &mut [f64]) {
    let n = src.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + src[i];
    }
    for (i, o) in out.iter_mut().enumerate() {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(n);
        *o = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
    }
}

/// Separable box blur of an `n×n` field.
pub fn box_blur(field: &[f64], n: usize, radius: usize) -> Vec<f64> {
    let mut rows = vec![0.0; n * n];
    for r in 0..n {
        box_blur_line(
            &field[r * n..(r + 1) * n],
            radius,
            &mut rows[r * n..(r + 1) * n],
        );
    }
    let mut out = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    let mut blurred = vec![0.0; n];
    for c in 0..n {
        for r in 0..n {
            col[r] = rows[r * n + c];
        }
        box_blur_line(&col, radius, &mut blurred);
        for r in 0..n {
            out[r * n + c] = blurred[r];
        }
    }
    out
}

/// Smoothed uniform noise thresholded at its median into `{lo, hi}`.
pub fn gen_coefficient_valued(seed: u64, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = crate::rng::stream(seed, "coefficient");
    let noise: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = box_blur(&noise, n, (n / 8).max(1));
    let mut sorted = smooth.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[k - 1] + sorted[k])
    } else {
        sorted[k]
    };
    let data = smooth
        .iter()
        .map(|&v| if v > median { hi } else { lo })
        .collect();
    Tensor::from_parts(vec![n, n], data)
}

/// Coefficient with the default values 3 and 12.
pub fn gen_coefficient(seed: u64, n: usize) -> Tensor<f64> {
    gen_coefficient_valued(seed, n, A_LO, A_HI)
}

/// Bilinear interpolation of a node-centred `[n×n]` field onto `[m×m]`.
pub fn resample_grid<T: Real>(field: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (n, n2) = field.dims2()?;
    if n != n2 || n < 2 || m < 2 {
        return Err(Error::invalid(
            "resample_grid",
            format!("need square grids of side >= 2, got {n}x{n2} -> {m}x{m}"),
        ));
    }
    if m == n {
        return Ok(field.clone());
    }
    let src = field.data();
    let scale = (n - 1) as f64 / (m - 1) as f64;
    let locate = |i: usize| {
        let pos = i as f64 * scale;
        let base = (pos.floor() as usize).min(n - 2);
        (base, pos - base as f64)
    };
    let mut out = Vec::with_capacity(m * m);
    for r in 0..m {
        let (r0, tr) = locate(r);
        for c in 0..m {
            let (c0, tc) = locate(c);
            let v = |rr: usize, cc: usize| src[rr * n + cc].as_f64();
            let top = v(r0, c0) * (1.0 - tc) + v(r0, c0 + 1) * tc;
            let bottom = v(r0 + 1, c0) * (1.0 - tc) + v(r0 + 1, c0 + 1) * tc;
            out.push(T::lit(top * (1.0 - tr) + bottom * tr));
        }
    }
    Ok(Tensor::from_parts(vec![m, m], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::solver::grid_field;

    #[test]
    fn coefficient_is_two_valued_and_balanced() {
        for seed in 0..10 {
            let a = gen_coefficient(seed, 16);
            assert!(a.data().iter().all(|&v| v == A_LO || v == A_HI));
            let hi = a.data().iter().filter(|&&v| v == A_HI).count() as f64 / 256.0;
            assert!((0.4..=0.6).contains(&hi), "seed {seed}: {hi}");
        }
        assert_eq!(gen_coefficient(5, 16), gen_coefficient(5, 16));
        assert_ne!(gen_coefficient(5, 16), gen_coefficient(6, 16));
    }

    #[test]
    fn resample_identity_constant_and_linear() {
        let f = gen_coefficient(1, 9);
        assert_eq!(resample_grid(&f, 9).unwrap(), f);
        let c = Tensor::<f64>::full([7, 7], 2.5);
        assert!(resample_grid(&c, 13)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-14));
        let lin = |n| grid_field(n, |x, y| x + 2.0 * y);
        for (n, m) in [(7, 13), (16, 24), (32, 16)] {
            let got = resample_grid(&lin(n), m).unwrap();
            assert!(got.max_abs_diff(&lin(m)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn up_then_down_recovers_smooth_field() {
        let g = |x: f64, y: f64| (1.5 * x).sin() * y.cos();
        let n = 33;
        let f = grid_field(n, g);
        let back = resample_grid(&resample_grid(&f, 2 * n).unwrap(), n).unwrap();
        assert!(back.max_abs_diff(&f).unwrap() < 1e-3);
    }
}
