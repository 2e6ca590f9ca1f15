//! AdamW with decoupled weight decay, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update. Decay is applied as `p ← p·(1 − lr·wd)` before the
/// bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!(
                "{} parameters, {} gradients, {} moment tensors",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - lr * opt.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = gj.as_f64();
            let mj = opt.beta1 * m[j].as_f64() + (1.0 - opt.beta1) * g;
            let vj = opt.beta2 * v[j].as_f64() + (1.0 - opt.beta2) * g * g;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + opt.eps);
            *pj = T::lit(pj.as_f64() * decay - lr * update);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    #[default]
    OneCycle,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(ScheduleKind::Cosine),
            "onecycle" => Some(ScheduleKind::OneCycle),
            _ => None,
        }
    }
}

pub const ONECYCLE_WARMUP: f64 = 0.3;
pub const ONECYCLE_START_DIV: f64 = 25.0;
pub const ONECYCLE_END_DIV: f64 = 1e4;

/// Learning rate at `step` of `total_steps`.
///
/// Cosine: `lr₀·½(1 + cos(π·s/T))`. One-cycle: linear warm-up from
/// `lr₀/25` to `lr₀` over the first 30% of steps, then cosine annealing
/// towards `lr₀/10⁴`.
pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    kind: ScheduleKind,
    init_lr: f64,
) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!(
            "schedule step {step} outside 0..{total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    let cosine = |t: f64| 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    Ok(match kind {
        ScheduleKind::Cosine => init_lr * cosine(frac),
        ScheduleKind::OneCycle => {
            let start = init_lr / ONECYCLE_START_DIV;
            let end = init_lr / ONECYCLE_END_DIV;
            if frac <= ONECYCLE_WARMUP {
                start + (init_lr - start) * frac / ONECYCLE_WARMUP
            } else {
                end + (init_lr - end) * cosine((frac - ONECYCLE_WARMUP) / (1.0 - ONECYCLE_WARMUP))
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_f64([1], &[v]).unwrap()]
    }

    #[test]
    fn zero_gradient_cases() {
        let mut p = scalar(2.0);
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &scalar(0.0), &mut st, 1e-2, &AdamW::default()).unwrap();
        assert_eq!(p[0].data()[0], 2.0);
        let wd = AdamW {
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut p, &scalar(0.0), &mut st, 1e-2, &wd).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 1e-2 * 0.5)).abs() < 1e-15);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn first_step_scalar_oracle() {
        let mut p = scalar(0.0);
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &scalar(0.5), &mut st, 1e-3, &AdamW::default()).unwrap();
        let want = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
        assert!((p[0].data()[0] + 9.99998e-4).abs() < 1e-8);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(p) = (p - 3)^2
        let mut p = scalar(-1.0);
        let mut st = OptimState::new(&p);
        for step in 0..5000 {
            let g = 2.0 * (p[0].data()[0] - 3.0);
            let lr = lr_schedule(step, 5000, ScheduleKind::Cosine, 0.05).unwrap();
            adamw_step(&mut p, &scalar(g), &mut st, lr, &AdamW::default()).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 1e-6, "{}", p[0].data()[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(1.0);
        let mut st = OptimState::new(&p);
        let g = vec![Tensor::<f64>::zeros([2])];
        assert!(adamw_step(&mut p, &g, &mut st, 1e-3, &AdamW::default()).is_err());
    }

    #[test]
    fn schedule_shapes() {
        let total = 100;
        assert_eq!(
            lr_schedule(0, total, ScheduleKind::Cosine, 1e-3).unwrap(),
            1e-3
        );
        assert!(lr_schedule(total - 1, total, ScheduleKind::Cosine, 1e-3).unwrap() < 1e-6);
        assert!(lr_schedule(total, total, ScheduleKind::Cosine, 1e-3).is_err());
        assert!(
            (lr_schedule(30, total, ScheduleKind::OneCycle, 1e-3).unwrap() - 1e-3).abs() < 1e-18
        );
        assert!(
            (lr_schedule(0, total, ScheduleKind::OneCycle, 1e-3).unwrap() - 4e-5).abs() < 1e-18
        );
        let cos: Vec<f64> = (0..total)
            .map(|s| lr_schedule(s, total, ScheduleKind::Cosine, 1.0).unwrap())
            .collect();
        assert!(cos.windows(2).all(|w| w[1] <= w[0]));
        let one: Vec<f64> = (0..total)
            .map(|s| lr_schedule(s, total, ScheduleKind::OneCycle, 1.0).unwrap())
            .collect();
        let peak = one.iter().cloned().fold(f64::MIN, f64::max);
        let at = one.iter().position(|&v| v == peak).unwrap();
        assert!(one[..=at].windows(2).all(|w| w[1] > w[0]));
        assert!(one[at..].windows(2).all(|w| w[1] < w[0]));
        assert!(one[total - 1] > 1e-4 && one[total - 1] < 1e-3);
    }
}
