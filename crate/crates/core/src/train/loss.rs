//! Relative L2 and gradient losses, on plain tensors and on the tape.
//!
//! The target is always treated as a constant: only the prediction carries
//! gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn truth_norm<T: Real>(truth: &Tensor<T>, op: &'static str) -> Result<f64> {
    let n = truth
        .data()
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::invalid(op, format!("reference field has norm {n}")))
    }
}

/// `‖pred − truth‖₂ / ‖truth‖₂` over all entries.
pub fn relative_l2<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("relative_l2", pred.shape(), truth.shape()));
    }
    let denom = truth_norm(truth, "relative_l2")?;
    let num = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

fn spacing<T: Real>(rows: usize, cols: usize) -> (T, T) {
    (
        T::lit(1.0 / (rows - 1) as f64),
        T::lit(1.0 / (cols - 1) as f64),
    )
}

/// Relative L2 between the finite-difference gradients of two grid fields.
pub fn gradient_loss<T: Real>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    grid: Option<(usize, usize)>,
) -> Result<f64> {
    let (rows, cols) =
        grid.ok_or_else(|| Error::invalid("gradient_loss", "needs a grid layout"))?;
    let h = spacing(rows, cols);
    let tape = Tape::new();
    let gp = tape
        .constant(pred.clone())
        .grid_gradient(rows, cols, h)?
        .value();
    let gt = tape
        .constant(truth.clone())
        .grid_gradient(rows, cols, h)?
        .value();
    relative_l2(&gp, &gt)
}

/// `relative_l2 + γ·gradient_loss`; the second term is skipped when `γ = 0`.
pub fn total_loss<T: Real>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    gamma: f64,
    grid: Option<(usize, usize)>,
) -> Result<f64> {
    let rel = relative_l2(pred, truth)?;
    if gamma == 0.0 {
        return Ok(rel);
    }
    Ok(rel + gamma * gradient_loss(pred, truth, grid)?)
}

pub fn relative_l2_var<'t, T: Real>(pred: Var<'t, T>, truth: Var<'t, T>) -> Result<Var<'t, T>> {
    let denom = truth.with_value(|t| truth_norm(t, "relative_l2"))?;
    let diff = pred.sub(&truth)?;
    Ok(diff.mul(&diff)?.sum().sqrt()?.scale(T::lit(1.0 / denom)))
}

pub fn gradient_loss_var<'t, T: Real>(
    pred: Var<'t, T>,
    truth: Var<'t, T>,
    grid: Option<(usize, usize)>,
) -> Result<Var<'t, T>> {
    let (rows, cols) =
        grid.ok_or_else(|| Error::invalid("gradient_loss", "needs a grid layout"))?;
    let h = spacing(rows, cols);
    relative_l2_var(
        pred.grid_gradient(rows, cols, h)?,
        truth.grid_gradient(rows, cols, h)?,
    )
}

pub fn total_loss_var<'t, T: Real>(
    pred: Var<'t, T>,
    truth: Var<'t, T>,
    gamma: f64,
    grid: Option<(usize, usize)>,
) -> Result<Var<'t, T>> {
    let rel = relative_l2_var(pred, truth)?;
    if gamma == 0.0 {
        return Ok(rel);
    }
    rel.add(&gradient_loss_var(pred, truth, grid)?.scale(T::lit(gamma)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid_field;

    fn col(t: Tensor<f64>) -> Tensor<f64> {
        let n = t.numel();
        t.reshape([n, 1]).unwrap()
    }

    #[test]
    fn relative_l2_examples() {
        let t = Tensor::<f64>::from_f64([2, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_l2(&Tensor::zeros([2, 1]), &t).unwrap(), 1.0);
        let p = Tensor::from_f64([2, 1], &[1.0, 0.0]).unwrap();
        assert!((relative_l2(&p, &t).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(relative_l2(&t, &Tensor::zeros([2, 1])).is_err());
    }

    #[test]
    fn gradient_loss_examples() {
        let n = 6;
        let truth = col(grid_field(n, |x, y| 2.0 * x - y));
        let shifted = truth.map(|v| v + 3.0);
        assert!(gradient_loss(&shifted, &truth, Some((n, n))).unwrap() < 1e-12);
        let curved = col(grid_field(n, |x, y| x * x + y.sin()));
        let doubled = curved.map(|v| 2.0 * v);
        assert!((gradient_loss(&doubled, &curved, Some((n, n))).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(gradient_loss(&curved, &curved, Some((n, n))).unwrap(), 0.0);
        assert!(gradient_loss(&curved, &curved, None).is_err());
    }

    #[test]
    fn total_loss_combines_both_terms() {
        let n = 5;
        let truth = col(grid_field(n, |x, y| x * x + y));
        let pred = truth.map(|v| 2.0 * v);
        let grid = Some((n, n));
        let rel = relative_l2(&pred, &truth).unwrap();
        assert_eq!(total_loss(&pred, &truth, 0.0, None).unwrap(), rel);
        let both = total_loss(&pred, &truth, 0.1, grid).unwrap();
        assert!((both - (1.0 + 0.1 * 1.0)).abs() < 1e-12);
        assert_eq!(total_loss(&truth, &truth, 0.1, grid).unwrap(), 0.0);
    }

    #[test]
    fn tape_versions_agree_with_tensor_versions() {
        let n = 5;
        let truth = col(grid_field(n, |x, y| (x + 0.3) * (y - 2.0)));
        let pred = col(grid_field(n, |x, y| x.cos() + y));
        let tape = Tape::new();
        let loss = total_loss_var(
            tape.leaf(pred.clone()),
            tape.constant(truth.clone()),
            0.1,
            Some((n, n)),
        )
        .unwrap()
        .value()
        .item()
        .unwrap();
        let want = total_loss(&pred, &truth, 0.1, Some((n, n))).unwrap();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let n = 4;
        let truth = col(grid_field(n, |x, y| x * x + 2.0 * y + 0.5));
        let pred = col(grid_field(n, |x, y| x - y * y + 1.0));
        let r = crate::gradcheck::fd_gradient_check(
            |p| {
                let t = p.tape().constant(truth.clone());
                total_loss_var(p, t, 0.1, Some((n, n)))
            },
            &pred,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }
}
