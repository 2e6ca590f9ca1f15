//! Central finite-difference oracle for reverse-mode gradients.

use rand::Rng as _;

use crate::attention::{AgentAttention, AgentAttentionConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{LanoConfig, LanoModel};
use crate::nn::{uniform, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
}

pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn fd_gradient_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    fd_gradient_check_many(|vars| f(vars[0]), std::slice::from_ref(x), step)
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn fd_gradient_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&vars)?.value().item()?;
        Ok(y)
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&vars)?;
    let y0 = root.value().item()?;
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {y0}")));
    }
    root.backward()?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            v.grad()
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect();

    let mut perturbed = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut worst: f64 = 0.0;
    for (which, x) in inputs.iter().enumerate() {
        let mut est = vec![0.0; x.numel()];
        for (i, e) in est.iter_mut().enumerate() {
            let orig = x.data()[i];
            perturbed[which].data_mut()[i] = orig + step;
            let plus = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig - step;
            let minus = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("perturbed evaluation".into()));
            }
            *e = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_deviation(analytic[which].data()[i], *e));
        }
        numeric.push(Tensor::from_parts(x.shape().to_vec(), est));
    }
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error: worst,
    })
}

/// Step used by the gradient-check suite.
pub const SUITE_STEP: f64 = 1e-5;

/// One named entry of [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_error: f64,
}

type Case = Box<dyn Fn(&mut Rng) -> Result<f64>>;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(shape.to_vec(), 1.0, rng)
}

/// Uniform values kept at least `gap` away from zero (for kinked ops).
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    rand_t(rng, shape).map(|v| if v < 0.0 { v - gap } else { v + gap })
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rand_t(rng, shape).map(|v| 1.25 + 0.75 * v)
}

/// Contracts `v` with fixed random weights so every output entry matters.
fn probe<'t>(v: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(v.mul(&v.tape().constant(w.clone()))?.sum())
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.gen_range(1..=8), rng.gen_range(1..=8))
}

fn unary_case(
    make: fn(&mut Rng, &[usize]) -> Tensor<f64>,
    op: for<'t> fn(Var<'t, f64>, usize, usize) -> Result<Var<'t, f64>>,
    out_shape: fn(usize, usize) -> Vec<usize>,
) -> Case {
    Box::new(move |rng| {
        let (r, c) = dims(rng);
        let x = make(rng, &[r, c]);
        let w = rand_t(rng, &out_shape(r, c));
        Ok(fd_gradient_check(|v| probe(op(v, r, c)?, &w), &x, SUITE_STEP)?.max_rel_error)
    })
}

fn op_cases() -> Vec<(&'static str, Case)> {
    let same = |r, c| vec![r, c];
    let mut cases: Vec<(&'static str, Case)> =
        vec![
            (
                "matmul",
                Box::new(|rng: &mut Rng| {
                    let (r, k) = dims(rng);
                    let c = rng.gen_range(1..=8);
                    let (a, b, w) = (
                        rand_t(rng, &[r, k]),
                        rand_t(rng, &[k, c]),
                        rand_t(rng, &[r, c]),
                    );
                    Ok(fd_gradient_check_many(
                        |v| probe(v[0].matmul(&v[1])?, &w),
                        &[a, b],
                        SUITE_STEP,
                    )?
                    .max_rel_error)
                }),
            ),
            (
                "scale",
                unary_case(rand_t, |v, _, _| Ok(v.scale(-1.7)), same),
            ),
            (
                "gelu",
                unary_case(
                    |g, s| rand_t(g, s).map(|v| 3.0 * v),
                    |v, _, _| Ok(v.gelu()),
                    same,
                ),
            ),
            (
                "relu",
                unary_case(
                    |g, s| away_from_zero(g, s, 0.1),
                    |v, _, _| Ok(v.relu()),
                    same,
                ),
            ),
            (
                "elu_plus_one",
                unary_case(
                    |g, s| away_from_zero(g, s, 0.1),
                    |v, _, _| Ok(v.elu_plus_one()),
                    same,
                ),
            ),
            ("sqrt", unary_case(positive, |v, _, _| v.sqrt(), same)),
            ("ln", unary_case(positive, |v, _, _| v.ln(), same)),
            (
                "transpose",
                unary_case(rand_t, |v, _, _| v.transpose(), |r, c| vec![c, r]),
            ),
            (
                "reshape",
                unary_case(rand_t, |v, r, c| v.reshape([r * c]), |r, c| vec![r * c]),
            ),
            (
                "slice_rows",
                unary_case(
                    rand_t,
                    |v, r, _| v.slice(0, r / 2, r - r / 2),
                    |r, c| vec![r - r / 2, c],
                ),
            ),
            (
                "slice_cols",
                unary_case(
                    rand_t,
                    |v, _, c| v.slice(1, c / 2, c - c / 2),
                    |r, c| vec![r, c - c / 2],
                ),
            ),
            (
                "mean_over_rows",
                unary_case(rand_t, |v, _, _| v.mean_over_axis(0), |_, c| vec![c]),
            ),
            (
                "mean_over_cols",
                unary_case(rand_t, |v, _, _| v.mean_over_axis(1), |r, _| vec![r]),
            ),
            (
                "sum",
                unary_case(rand_t, |v, _, _| Ok(v.sum()), |_, _| vec![]),
            ),
            (
                "softmax_rows",
                unary_case(
                    |g, s| rand_t(g, s).map(|v| 2.0 * v),
                    |v, _, _| v.softmax_rows(),
                    same,
                ),
            ),
        ];
    for (name, op) in [
        (
            "add",
            (|a, b| a.add(b)) as for<'t> fn(&Var<'t, f64>, &Var<'t, f64>) -> Result<Var<'t, f64>>,
        ),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
    ] {
        cases.push((
            name,
            Box::new(move |rng: &mut Rng| {
                let (r, c) = dims(rng);
                let (a, b, w) = (
                    rand_t(rng, &[r, c]),
                    rand_t(rng, &[r, c]),
                    rand_t(rng, &[r, c]),
                );
                Ok(
                    fd_gradient_check_many(|v| probe(op(&v[0], &v[1])?, &w), &[a, b], SUITE_STEP)?
                        .max_rel_error,
                )
            }),
        ));
    }
    for axis in [0usize, 1] {
        cases.push((
            if axis == 0 {
                "concat_rows"
            } else {
                "concat_cols"
            },
            Box::new(move |rng: &mut Rng| {
                let (r, c) = dims(rng);
                let extra = rng.gen_range(1..=4);
                let bshape = if axis == 0 { [extra, c] } else { [r, extra] };
                let out = if axis == 0 {
                    [r + extra, c]
                } else {
                    [r, c + extra]
                };
                let (a, b, w) = (
                    rand_t(rng, &[r, c]),
                    rand_t(rng, &bshape),
                    rand_t(rng, &out),
                );
                Ok(fd_gradient_check_many(
                    |v| probe(Var::concat(v, axis)?, &w),
                    &[a, b],
                    SUITE_STEP,
                )?
                .max_rel_error)
            }),
        ));
    }
    cases.push((
        "broadcast_add",
        Box::new(|rng: &mut Rng| {
            let (r, c) = dims(rng);
            let (x, b, w) = (
                rand_t(rng, &[r, c]),
                rand_t(rng, &[c]),
                rand_t(rng, &[r, c]),
            );
            Ok(fd_gradient_check_many(
                |v| probe(v[0].broadcast_add(&v[1])?, &w),
                &[x, b],
                SUITE_STEP,
            )?
            .max_rel_error)
        }),
    ));
    cases.push((
        "outer_sum",
        Box::new(|rng: &mut Rng| {
            let (r, c) = dims(rng);
            let (u, v0, w) = (rand_t(rng, &[r]), rand_t(rng, &[c]), rand_t(rng, &[r, c]));
            Ok(
                fd_gradient_check_many(
                    |v| probe(v[0].outer_sum(&v[1])?, &w),
                    &[u, v0],
                    SUITE_STEP,
                )?
                .max_rel_error,
            )
        }),
    ));
    cases.push((
        "layer_norm",
        Box::new(|rng: &mut Rng| {
            let r = rng.gen_range(1..=8);
            let c = rng.gen_range(2..=8);
            let x = rand_t(rng, &[r, c]);
            let (g, b, w) = (rand_t(rng, &[c]), rand_t(rng, &[c]), rand_t(rng, &[r, c]));
            Ok(fd_gradient_check_many(
                |v| probe(v[0].layer_norm(&v[1], &v[2], 1e-5)?, &w),
                &[x, g, b],
                SUITE_STEP,
            )?
            .max_rel_error)
        }),
    ));
    cases.push((
        "depthwise_conv3x3",
        Box::new(|rng: &mut Rng| {
            let (rows, cols, ch) = (
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
            );
            let n = rows * cols;
            let (x, k, b, w) = (
                rand_t(rng, &[n, ch]),
                rand_t(rng, &[ch, 9]),
                rand_t(rng, &[ch]),
                rand_t(rng, &[n, ch]),
            );
            Ok(fd_gradient_check_many(
                |v| probe(v[0].depthwise_conv3x3(&v[1], &v[2], rows, cols)?, &w),
                &[x, k, b],
                SUITE_STEP,
            )?
            .max_rel_error)
        }),
    ));
    cases.push((
        "grid_gradient",
        Box::new(|rng: &mut Rng| {
            let (rows, cols, ch) = (
                rng.gen_range(2..=4),
                rng.gen_range(2..=4),
                rng.gen_range(1..=3),
            );
            let n = rows * cols;
            let (x, w) = (rand_t(rng, &[n, ch]), rand_t(rng, &[2 * n, ch]));
            let h = (1.0 / (rows - 1) as f64, 1.0 / (cols - 1) as f64);
            Ok(fd_gradient_check(
                |v| probe(v.grid_gradient(rows, cols, h)?, &w),
                &x,
                SUITE_STEP,
            )?
            .max_rel_error)
        }),
    ));
    cases.push((
        "composite",
        Box::new(|rng: &mut Rng| {
            let (r, c) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
            let (a, b) = (rand_t(rng, &[r, c]), rand_t(rng, &[c, c]));
            let (g, beta, w) = (rand_t(rng, &[c]), rand_t(rng, &[c]), rand_t(rng, &[r, c]));
            Ok(fd_gradient_check_many(
                |v| {
                    let s = v[0].matmul(&v[1])?.softmax_rows()?;
                    probe(s.layer_norm(&v[2], &v[3], 1e-5)?, &w)
                },
                &[a, b, g, beta],
                SUITE_STEP,
            )?
            .max_rel_error)
        }),
    ));
    cases.push((
        "total_loss",
        Box::new(|rng: &mut Rng| {
            let (rows, cols) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let n = rows * cols;
            let (pred, truth) = (rand_t(rng, &[n, 1]), rand_t(rng, &[n, 1]));
            Ok(fd_gradient_check(
                |v| {
                    let t = v.tape().constant(truth.clone());
                    crate::train::total_loss_var(v, t, 0.1, Some((rows, cols)))
                },
                &pred,
                SUITE_STEP,
            )?
            .max_rel_error)
        }),
    ));
    cases
}

/// Gives the zero-initialised tensors (positional biases, layer-norm
/// shifts) random values so their paths carry signal; everything else keeps
/// its initialisation.
fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for t in store.tensors_mut() {
        if t.max_abs() == 0.0 {
            *t = uniform(t.shape().to_vec(), 0.5, rng);
        }
    }
}

fn attention_case(rng: &mut Rng) -> Result<f64> {
    let cfg = AgentAttentionConfig {
        bias_base_len: 4,
        ..AgentAttentionConfig::new(4, 2, 2)
    };
    let mut store = ParamStore::<f64>::new();
    let attn = AgentAttention::new(cfg, &mut store, "attn", rng)?;
    randomize(&mut store, rng);
    let x = rand_t(rng, &[6, 4]);
    let w = rand_t(rng, &[6, 4]);
    let mut inputs = store.tensors().to_vec();
    inputs.push(x);
    let last = inputs.len() - 1;
    Ok(fd_gradient_check_many(
        |v| probe(attn.forward(&v[..last], v[last], Some((2, 3)))?, &w),
        &inputs,
        SUITE_STEP,
    )?
    .max_rel_error)
}

fn model_case(rng: &mut Rng) -> Result<f64> {
    let cfg = LanoConfig {
        bias_base_len: 4,
        ..LanoConfig::sized(2, 2, 8, 2)
    };
    let mut model = LanoModel::<f64>::new(cfg, rng.gen())?;
    randomize(model.params_mut(), rng);
    let x = rand_t(rng, &[6, 2]);
    let a = rand_t(rng, &[6, 1]);
    let truth = rand_t(rng, &[6, 1]);
    Ok(fd_gradient_check_many(
        |p| {
            let tape = p[0].tape();
            let pred = model.forward(
                p,
                tape.constant(x.clone()),
                Some(tape.constant(a.clone())),
                Some((2, 3)),
            )?;
            crate::train::total_loss_var(pred, tape.constant(truth.clone()), 0.1, Some((2, 3)))
        },
        model.params().tensors(),
        SUITE_STEP,
    )?
    .max_rel_error)
}

/// Finite-difference checks of every differentiable op over `seeds`
/// random draws (shapes up to 8×8), plus a multi-head agent-attention layer
/// and a two-layer model (width 8, 2 heads, 2 agents, 6 tokens) with
/// respect to all of their parameters.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    let mut cases = op_cases();
    cases.push(("agent_attention_layer", Box::new(attention_case)));
    cases.push(("model_end_to_end", Box::new(model_case)));
    for (name, case) in &cases {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = crate::rng::indexed_stream(seed, name, 0);
            worst = worst.max(case(&mut rng)?);
        }
        out.push(SuiteCase {
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
