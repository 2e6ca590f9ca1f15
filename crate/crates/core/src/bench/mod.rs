//! Timing sweeps, ablations and resolution-transfer evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::attention::{
    agent_mediated, flop_count, linear_attention, pooling_matrix, softmax_attention, AgentSource,
    AttentionVariant, FeatureMap,
};
use crate::autodiff::Tape;
use crate::data::{Dataset, Normalizer, Sample};
use crate::error::{Error, Result};
use crate::model::{LanoConfig, LanoModel};
use crate::nn::uniform;
use crate::parallel::Parallelism;
use crate::tensor::{Real, Tensor};
use crate::train::{evaluate, train, TrainConfig, TrainOptions};

/// Coefficient of variation above which a timing row is retried, then flagged.
pub const MAX_TIMING_CV: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub variant: AttentionVariant,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub h: usize,
    pub flops: u64,
    /// Median over the timed repetitions.
    pub wall_seconds: f64,
    pub cv: f64,
    /// Timing stayed noisy after one retry.
    pub unstable: bool,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub results: Vec<BenchResult>,
    /// Least-squares slope of `ln(wall_seconds)` against `ln(N)`.
    pub slope: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TimingConfig {
    pub warmups: usize,
    pub reps: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            warmups: 2,
            reps: 5,
        }
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        0.5 * (xs[k - 1] + xs[k])
    } else {
        xs[k]
    }
}

fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Inputs for one attention kernel evaluation: per-head `Q, K, V: [N×d/H]`.
pub struct KernelInputs<T: Real> {
    pub q: Vec<Tensor<T>>,
    pub k: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub pool: Tensor<T>,
}

impl<T: Real> KernelInputs<T> {
    pub fn random(n: usize, m: usize, d: usize, h: usize, seed: u64) -> Result<Self> {
        if h == 0 || !d.is_multiple_of(h) {
            return Err(Error::Config(format!(
                "d = {d} is not divisible by H = {h}"
            )));
        }
        let mut rng = crate::rng::stream(seed, "bench.inputs");
        let mut draw = || {
            (0..h)
                .map(|_| uniform([n, d / h], 1.0, &mut rng))
                .collect::<Vec<_>>()
        };
        Ok(KernelInputs {
            q: draw(),
            k: draw(),
            v: draw(),
            pool: pooling_matrix(n, m.min(n))?,
        })
    }
}

/// One forward evaluation of the bare multi-head kernel (no projections).
pub fn run_kernel<T: Real>(variant: AttentionVariant, inputs: &KernelInputs<T>) -> Result<T> {
    let tape = Tape::new();
    let dh = inputs.q[0].shape()[1];
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let pool = tape.constant(inputs.pool.clone());
    let mut checksum = T::zero();
    for h in 0..inputs.q.len() {
        let q = tape.constant(inputs.q[h].clone());
        let k = tape.constant(inputs.k[h].clone());
        let v = tape.constant(inputs.v[h].clone());
        let out = match variant {
            AttentionVariant::Softmax => softmax_attention(q, k, v, scale)?,
            AttentionVariant::Linear => linear_attention(q, k, v, FeatureMap::EluPlusOne)?,
            AttentionVariant::Agent => {
                agent_mediated(q, k, v, pool.matmul(&q)?, None, None, scale)?.output
            }
        };
        checksum += out.with_value(|t| t.data()[0]);
    }
    Ok(checksum)
}

fn time_reps<T: Real>(
    variant: AttentionVariant,
    inputs: &KernelInputs<T>,
    timing: &TimingConfig,
) -> Result<Vec<f64>> {
    for _ in 0..timing.warmups {
        std::hint::black_box(run_kernel(variant, inputs)?);
    }
    (0..timing.reps.max(1))
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(run_kernel(variant, inputs)?);
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

/// Times one attention variant over a list of token counts.
pub fn scaling_sweep(
    variant: AttentionVariant,
    ns: &[usize],
    m: usize,
    d: usize,
    h: usize,
    timing: &TimingConfig,
    seed: u64,
) -> Result<Sweep> {
    let mut distinct = ns.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::Config(
            "a scaling sweep needs at least 4 distinct token counts".into(),
        ));
    }
    let mut results = Vec::with_capacity(ns.len());
    for &n in ns {
        let inputs = KernelInputs::<f32>::random(n, m, d, h, seed)?;
        let mut times = time_reps(variant, &inputs, timing)?;
        let mut cv = coefficient_of_variation(&times);
        if cv >= MAX_TIMING_CV {
            times = time_reps(variant, &inputs, timing)?;
            cv = coefficient_of_variation(&times);
        }
        results.push(BenchResult {
            variant,
            n,
            m,
            d,
            h,
            flops: flop_count(variant, n, m, d, h).total(),
            wall_seconds: median(&mut times),
            cv,
            unstable: cv >= MAX_TIMING_CV,
        });
    }
    let lx: Vec<f64> = results.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = results.iter().map(|r| r.wall_seconds.ln()).collect();
    Ok(Sweep {
        slope: fit_slope(&lx, &ly),
        results,
    })
}

/// CSV with `# key: value` header lines recording the run.
pub fn write_csv(
    path: &Path,
    header: &[(&str, String)],
    columns: &str,
    rows: &[String],
) -> Result<()> {
    let mut out = String::new();
    for (k, v) in header {
        writeln!(out, "# {k}: {v}").expect("writing to a String");
    }
    writeln!(out, "{columns}").expect("writing to a String");
    for r in rows {
        writeln!(out, "{r}").expect("writing to a String");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub const SWEEP_COLUMNS: &str = "variant,n,m,d,h,flops,wall_seconds,cv,unstable";

impl BenchResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:e},{:.4},{}",
            self.variant.name(),
            self.n,
            self.m,
            self.d,
            self.h,
            self.flops,
            self.wall_seconds,
            self.cv,
            self.unstable
        )
    }
}

/// One trained configuration in an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub agents: usize,
    pub seed: u64,
    pub params: usize,
    pub test_rel_l2: f64,
}

pub const ABLATION_COLUMNS: &str = "label,agents,seed,params,test_rel_l2";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:e}",
            self.label, self.agents, self.seed, self.params, self.test_rel_l2
        )
    }
}

fn train_one<T: Real>(
    label: &str,
    cfg: LanoConfig,
    data: &Dataset<T>,
    tc: &TrainConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<AblationRow> {
    let tc = TrainConfig { seed, ..tc.clone() };
    let model = LanoModel::<T>::new(cfg.clone(), seed)?;
    let params = model.param_count();
    let report = train(model, data, &tc, opts)?;
    Ok(AblationRow {
        label: label.to_string(),
        agents: cfg.agents,
        seed,
        params,
        test_rel_l2: report.final_test_rel_l2(),
    })
}

/// One training run per agent count, all with the same seed.
pub fn agent_count_ablation<T: Real>(
    data: &Dataset<T>,
    agent_counts: &[usize],
    base: &LanoConfig,
    tc: &TrainConfig,
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    let tokens = data.tokens();
    if let Some(&m) = agent_counts.iter().find(|&&m| m > tokens) {
        return Err(Error::TooFewTokens { tokens, agents: m });
    }
    agent_counts
        .iter()
        .map(|&m| {
            let cfg = LanoConfig {
                agents: m,
                ..base.clone()
            };
            train_one(&format!("M={m}"), cfg, data, tc, tc.seed, opts)
        })
        .collect()
}

/// The component variants compared against the reference configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Reference,
    NoBias,
    NoDwc,
    NoBiasNoDwc,
    LatentAgents,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Reference,
        Component::NoBias,
        Component::NoDwc,
        Component::NoBiasNoDwc,
        Component::LatentAgents,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Reference => "reference",
            Component::NoBias => "no_bias",
            Component::NoDwc => "no_dwc",
            Component::NoBiasNoDwc => "no_bias_no_dwc",
            Component::LatentAgents => "latent_agents",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Component::ALL.into_iter().find(|c| c.label() == s)
    }

    pub fn apply(self, base: &LanoConfig) -> LanoConfig {
        let mut cfg = base.clone();
        match self {
            Component::Reference => {}
            Component::NoBias => cfg.bias_enabled = false,
            Component::NoDwc => cfg.dwc_enabled = false,
            Component::NoBiasNoDwc => {
                cfg.bias_enabled = false;
                cfg.dwc_enabled = false;
            }
            Component::LatentAgents => cfg.agent_source = AgentSource::Latent,
        }
        cfg
    }
}

pub const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

/// Trains every variant under every seed; rows come out variant-major.
pub fn component_ablation<T: Real>(
    data: &Dataset<T>,
    base: &LanoConfig,
    variants: &[Component],
    seeds: &[u64],
    tc: &TrainConfig,
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    if data.grid().is_none() && variants.iter().any(|v| v.apply(base).dwc_enabled) {
        return Err(Error::Config(
            "the depthwise-convolution arms need a grid dataset".into(),
        ));
    }
    let mut rows = Vec::new();
    for &v in variants {
        for &seed in seeds {
            rows.push(train_one(v.label(), v.apply(base), data, tc, seed, opts)?);
        }
    }
    Ok(rows)
}

/// Mean test error per label, in first-seen order.
pub fn mean_by_label(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(l, _, _)| *l == r.label) {
            Some(e) => {
                e.1 += r.test_rel_l2;
                e.2 += 1;
            }
            None => out.push((r.label.clone(), r.test_rel_l2, 1)),
        }
    }
    out.into_iter().map(|(l, s, n)| (l, s / n as f64)).collect()
}

/// A labelled evaluation set at some resolution.
pub struct EvalSet<'a, T: Real> {
    pub label: String,
    pub samples: &'a [Sample<T>],
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotRow {
    pub label: String,
    pub tokens: usize,
    pub test_rel_l2: f64,
}

/// Forward-only evaluation of one set of weights at several resolutions.
pub fn zero_shot_eval<T: Real>(
    model: &LanoModel<T>,
    norm: &Normalizer,
    sets: &[EvalSet<'_, T>],
    par: Parallelism,
) -> Result<Vec<ZeroShotRow>> {
    sets.iter()
        .map(|s| {
            let tokens = s.samples.first().map_or(0, Sample::tokens);
            if tokens < model.config().agents {
                return Err(Error::TooFewTokens {
                    tokens,
                    agents: model.config().agents,
                });
            }
            Ok(ZeroShotRow {
                label: s.label.clone(),
                tokens,
                test_rel_l2: evaluate(model, norm, s.samples, s.grid, par)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let x: Vec<f64> = [256.0f64, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|v| v.ln())
            .collect();
        let y: Vec<f64> = [256.0f64, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|v| (3.0 * v * v).ln())
            .collect();
        assert!((fit_slope(&x, &y) - 2.0).abs() < 1e-12);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert!(coefficient_of_variation(&[1.0, 1.0, 1.0]) < 1e-15);
    }

    #[test]
    fn sweep_reports_closed_form_flops() {
        let timing = TimingConfig {
            warmups: 0,
            reps: 1,
        };
        let sweep = scaling_sweep(
            AttentionVariant::Agent,
            &[16, 32, 48, 64],
            4,
            8,
            2,
            &timing,
            0,
        )
        .unwrap();
        for r in &sweep.results {
            assert_eq!(
                r.flops,
                flop_count(AttentionVariant::Agent, r.n, 4, 8, 2).total()
            );
            assert!(r.wall_seconds > 0.0);
        }
        assert!(scaling_sweep(
            AttentionVariant::Agent,
            &[16, 32, 32, 64],
            4,
            8,
            2,
            &timing,
            0
        )
        .is_err());
    }

    #[test]
    fn kernels_agree_on_a_checksum_shape() {
        let inputs = KernelInputs::<f32>::random(12, 3, 8, 2, 1).unwrap();
        for v in [
            AttentionVariant::Softmax,
            AttentionVariant::Linear,
            AttentionVariant::Agent,
        ] {
            assert!(run_kernel(v, &inputs).unwrap().is_finite());
        }
    }

    #[test]
    fn component_configs() {
        let base = LanoConfig::default();
        assert!(!Component::NoDwc.apply(&base).dwc_enabled);
        let plain = Component::NoBiasNoDwc.apply(&base);
        assert!(!plain.dwc_enabled && !plain.bias_enabled);
        assert_eq!(
            Component::LatentAgents.apply(&base).agent_source,
            AgentSource::Latent
        );
        assert_eq!(Component::parse("no_bias"), Some(Component::NoBias));
        let rows = vec![
            AblationRow {
                label: "a".into(),
                agents: 1,
                seed: 1,
                params: 1,
                test_rel_l2: 1.0,
            },
            AblationRow {
                label: "b".into(),
                agents: 1,
                seed: 1,
                params: 1,
                test_rel_l2: 5.0,
            },
            AblationRow {
                label: "a".into(),
                agents: 1,
                seed: 2,
                params: 1,
                test_rel_l2: 3.0,
            },
        ];
        assert_eq!(
            mean_by_label(&rows),
            vec![("a".to_string(), 2.0), ("b".to_string(), 5.0)]
        );
    }
}
