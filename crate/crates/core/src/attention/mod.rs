//! Softmax, linear and agent attention.
//!
//! Agent attention routes global mixing through `M` agent tokens:
//!
//! ```text
//! S1 = softmax(A·Kᵀ·s + B1)   [M×N]   aggregation
//! Y  = S1·V                   [M×d]
//! S2 = softmax(Q·Aᵀ·s + B2)   [N×M]   mediation
//! O  = S2·Y                   [N×d]
//! ```
//!
//! which equals the dense product `S2·S1·V` while never forming an `N×N`
//! matrix, so the cost is `O(N·M·d)`.

mod flops;

pub use flops::{flop_count, AttentionVariant, FlopCount};

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{fan_in_bound, uniform, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// How agent tokens are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentSource {
    /// Segment-mean pooling of each head's queries.
    #[default]
    QueryPooling,
    /// A learned `M×d_model` matrix independent of the input.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub agents: usize,
    pub bias_base_len: usize,
    pub dwc_enabled: bool,
    pub bias_enabled: bool,
    pub agent_source: AgentSource,
}

impl AgentAttentionConfig {
    pub fn new(d_model: usize, heads: usize, agents: usize) -> Self {
        AgentAttentionConfig {
            d_model,
            heads,
            agents,
            bias_base_len: 64,
            dwc_enabled: true,
            bias_enabled: true,
            agent_source: AgentSource::QueryPooling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model = {} must be a positive multiple of heads = {}",
                self.d_model, self.heads
            )));
        }
        if self.agents == 0 {
            return Err(Error::Config("agents must be at least 1".into()));
        }
        if self.bias_base_len < 2 {
            return Err(Error::Config("bias_base_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Per-head score scale `1 / sqrt(d_model / H)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// `softmax(Q·Kᵀ·scale)·V`.
pub fn softmax_attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    scale: T,
) -> Result<Var<'t, T>> {
    check_qkv("softmax_attention", &q, &k, &v)?;
    let scores = q.matmul(&k.transpose()?)?.scale(scale);
    scores.softmax_rows()?.matmul(&v)
}

/// Feature map of linear attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMap {
    Identity,
    /// `elu(x) + 1`, strictly positive.
    #[default]
    EluPlusOne,
}

impl FeatureMap {
    fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            FeatureMap::Identity => x,
            FeatureMap::EluPlusOne => x.elu_plus_one(),
        }
    }
}

/// `φ(Q)·(φ(K)ᵀ·V)`, evaluated right to left.
pub fn linear_attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    phi: FeatureMap,
) -> Result<Var<'t, T>> {
    check_qkv("linear_attention", &q, &k, &v)?;
    let kv = phi.apply(k).transpose()?.matmul(&v)?;
    phi.apply(q).matmul(&kv)
}

fn check_qkv<T: Real>(
    op: &'static str,
    q: &Var<'_, T>,
    k: &Var<'_, T>,
    v: &Var<'_, T>,
) -> Result<()> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::invalid(op, "Q, K and V must be matrices"));
    }
    if qs[1] != ks[1] {
        return Err(Error::shape(op, &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape(op, &ks, &vs));
    }
    Ok(())
}

/// Segment bounds `[start, end)` splitting `n` tokens into `m` contiguous
/// groups; the first `n mod m` groups get one extra token.
pub fn segments(n: usize, m: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (n / m, n % m);
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// `[M×N]` segment-mean pooling operator.
pub fn pooling_matrix<T: Real>(n: usize, m: usize) -> Result<Tensor<T>> {
    if m == 0 || n < m {
        return Err(Error::TooFewTokens {
            tokens: n,
            agents: m,
        });
    }
    let mut data = vec![T::zero(); m * n];
    for (i, (s, e)) in segments(n, m).into_iter().enumerate() {
        let w = T::one() / T::lit((e - s) as f64);
        for j in s..e {
            data[i * n + j] = w;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], data))
}

/// Pools `q: [N×d]` into `m` agent tokens `[M×d]` by segment means.
pub fn agent_pool<'t, T: Real>(q: Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    let (n, _) = q.with_value(|t| t.dims2())?;
    let pool = q.tape().constant(pooling_matrix(n, m)?);
    pool.matmul(&q)
}

/// `[N₀×N]` linear-interpolation operator taking a length-`N₀` base vector
/// onto `N` uniformly spaced positions spanning the same interval. A single
/// target position samples the base at its midpoint.
pub fn resample_matrix<T: Real>(base_len: usize, n: usize) -> Tensor<T> {
    assert!(base_len >= 1 && n >= 1);
    let mut data = vec![T::zero(); base_len * n];
    for j in 0..n {
        let pos = if n == 1 {
            (base_len - 1) as f64 / 2.0
        } else {
            j as f64 * (base_len - 1) as f64 / (n - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(base_len - 1);
        let frac = pos - i0 as f64;
        data[i0 * n + j] += T::lit(1.0 - frac);
        if frac > 0.0 {
            data[(i0 + 1) * n + j] += T::lit(frac);
        }
    }
    Tensor::from_parts(vec![base_len, n], data)
}

pub fn resample_linear<T: Real>(base: &[T], n: usize) -> Vec<T> {
    let r = resample_matrix::<T>(base.len(), n);
    let row = Tensor::from_parts(vec![1, base.len()], base.to_vec());
    row.matmul(&r).expect("conforming shapes").into_data()
}

/// The four per-head bias vectors: `u1, v2: [H×M]`, `v1_base, u2_base: [H×N₀]`.
#[derive(Debug, Clone, Copy)]
pub struct AgentBias {
    pub u1: ParamId,
    pub v1_base: ParamId,
    pub u2_base: ParamId,
    pub v2: ParamId,
}

impl AgentBias {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &AgentAttentionConfig) -> Self {
        let (h, m, n0) = (cfg.heads, cfg.agents, cfg.bias_base_len);
        AgentBias {
            u1: store.register(format!("{name}.u1"), Tensor::zeros([h, m])),
            v1_base: store.register(format!("{name}.v1_base"), Tensor::zeros([h, n0])),
            u2_base: store.register(format!("{name}.u2_base"), Tensor::zeros([h, n0])),
            v2: store.register(format!("{name}.v2"), Tensor::zeros([h, m])),
        }
    }
}

/// Per-head bias matrices for `n` tokens:
/// `B1[h][m, n] = u1[h, m] + resample(v1_base[h])[n]` (`[M×N]`) and
/// `B2[h][n, m] = resample(u2_base[h])[n] + v2[h, m]` (`[N×M]`).
pub fn build_biases<'t, T: Real>(
    p: &[Var<'t, T>],
    bias: &AgentBias,
    n: usize,
) -> Result<(Vec<Var<'t, T>>, Vec<Var<'t, T>>)> {
    let u1 = p[bias.u1.0];
    let (heads, agents) = u1.with_value(|t| t.dims2())?;
    let (_, base_len) = p[bias.v1_base.0].with_value(|t| t.dims2())?;
    let tape = u1.tape();
    let resample = tape.constant(resample_matrix(base_len, n));
    let v1 = p[bias.v1_base.0].matmul(&resample)?;
    let u2 = p[bias.u2_base.0].matmul(&resample)?;
    let v2 = p[bias.v2.0];
    let mut b1 = Vec::with_capacity(heads);
    let mut b2 = Vec::with_capacity(heads);
    for h in 0..heads {
        let row = |x: Var<'t, T>, len: usize| x.slice(0, h, 1)?.reshape([len]);
        b1.push(row(u1, agents)?.outer_sum(&row(v1, n)?)?);
        b2.push(row(u2, n)?.outer_sum(&row(v2, agents)?)?);
    }
    Ok((b1, b2))
}

/// The parts of [`build_biases`] that survive the row-wise softmax.
///
/// `u1[h, m]` is constant along each row of `B1` and `resample(u2_base[h])[n]`
/// along each row of `B2`, so both cancel exactly inside `softmax_rows` and
/// carry no gradient. Leaving them out gives the same attention weights
/// without injecting rounding noise from terms that cancel.
pub fn effective_biases<'t, T: Real>(
    p: &[Var<'t, T>],
    bias: &AgentBias,
    n: usize,
) -> Result<(Vec<Var<'t, T>>, Vec<Var<'t, T>>)> {
    let v2 = p[bias.v2.0];
    let (heads, agents) = v2.with_value(|t| t.dims2())?;
    let (_, base_len) = p[bias.v1_base.0].with_value(|t| t.dims2())?;
    let tape = v2.tape();
    let v1 = p[bias.v1_base.0].matmul(&tape.constant(resample_matrix(base_len, n)))?;
    let zeros_m = tape.constant(Tensor::zeros([agents]));
    let zeros_n = tape.constant(Tensor::zeros([n]));
    let mut b1 = Vec::with_capacity(heads);
    let mut b2 = Vec::with_capacity(heads);
    for h in 0..heads {
        let row = |x: Var<'t, T>, len: usize| x.slice(0, h, 1)?.reshape([len]);
        b1.push(zeros_m.outer_sum(&row(v1, n)?)?);
        b2.push(zeros_n.outer_sum(&row(v2, agents)?)?);
    }
    Ok((b1, b2))
}

/// Depthwise 3×3 stencil weights `[d×9]` and per-channel bias `[d]`.
#[derive(Debug, Clone, Copy)]
pub struct DwcKernel {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DwcKernel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = fan_in_bound(9);
        DwcKernel {
            weight: store.register(format!("{name}.weight"), uniform([channels, 9], bound, rng)),
            bias: store.register(format!("{name}.bias"), uniform([channels], bound, rng)),
        }
    }
}

/// Zero-padded per-channel 3×3 convolution of `v: [N×d]` on a `rows × cols` grid.
pub fn dwc_apply<'t, T: Real>(
    p: &[Var<'t, T>],
    v: Var<'t, T>,
    grid: (usize, usize),
    kernel: &DwcKernel,
) -> Result<Var<'t, T>> {
    v.depthwise_conv3x3(&p[kernel.weight.0], &p[kernel.bias.0], grid.0, grid.1)
}

/// Intermediate results of one two-stage agent attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AgentStages<'t, T: Real> {
    /// `S1 = softmax(A·Kᵀ·s + B1)`, `[M×N]`.
    pub aggregation: Var<'t, T>,
    /// `S2 = softmax(Q·Aᵀ·s + B2)`, `[N×M]`.
    pub mediation: Var<'t, T>,
    pub output: Var<'t, T>,
}

/// Two-stage agent attention for one head with given agent tokens.
pub fn agent_mediated<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    agents: Var<'t, T>,
    b1: Option<Var<'t, T>>,
    b2: Option<Var<'t, T>>,
    scale: T,
) -> Result<AgentStages<'t, T>> {
    check_qkv("agent_attention", &q, &k, &v)?;
    let mut s1 = agents.matmul(&k.transpose()?)?.scale(scale);
    if let Some(b1) = b1 {
        s1 = s1.add(&b1)?;
    }
    let s1 = s1.softmax_rows()?;
    let y = s1.matmul(&v)?;
    let mut s2 = q.matmul(&agents.transpose()?)?.scale(scale);
    if let Some(b2) = b2 {
        s2 = s2.add(&b2)?;
    }
    let s2 = s2.softmax_rows()?;
    let output = s2.matmul(&y)?;
    Ok(AgentStages {
        aggregation: s1,
        mediation: s2,
        output,
    })
}

/// Multi-head agent attention with projections, positional biases and DWC.
#[derive(Debug, Clone)]
pub struct AgentAttention {
    pub cfg: AgentAttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub bias: Option<AgentBias>,
    pub dwc: Option<DwcKernel>,
    pub latent: Option<ParamId>,
}

impl AgentAttention {
    pub fn new<T: Real>(
        cfg: AgentAttentionConfig,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let q = Linear::new(store, &format!("{name}.q"), d, d, rng);
        let k = Linear::new(store, &format!("{name}.k"), d, d, rng);
        let v = Linear::new(store, &format!("{name}.v"), d, d, rng);
        let o = Linear::new(store, &format!("{name}.o"), d, d, rng);
        let bias = cfg
            .bias_enabled
            .then(|| AgentBias::new(store, &format!("{name}.bias"), &cfg));
        let dwc = cfg
            .dwc_enabled
            .then(|| DwcKernel::new(store, &format!("{name}.dwc"), d, rng));
        let latent = (cfg.agent_source == AgentSource::Latent)
            .then(|| store.register(format!("{name}.agents"), uniform([cfg.agents, d], 1.0, rng)));
        Ok(AgentAttention {
            cfg,
            q,
            k,
            v,
            o,
            bias,
            dwc,
            latent,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        x: Var<'t, T>,
        grid: Option<(usize, usize)>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_traced(p, x, grid)?.0)
    }

    /// Forward pass that also returns each head's two softmax stages.
    pub fn forward_traced<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        x: Var<'t, T>,
        grid: Option<(usize, usize)>,
    ) -> Result<(Var<'t, T>, Vec<AgentStages<'t, T>>)> {
        let cfg = &self.cfg;
        let (n, width) = x.with_value(|t| t.dims2())?;
        if width != cfg.d_model {
            return Err(Error::shape(
                "agent_attention",
                &[n, width],
                &[n, cfg.d_model],
            ));
        }
        if n < cfg.agents {
            return Err(Error::TooFewTokens {
                tokens: n,
                agents: cfg.agents,
            });
        }
        if let Some((r, c)) = grid {
            if r * c != n {
                return Err(Error::GridMismatch {
                    rows: r,
                    cols: c,
                    tokens: n,
                });
            }
        }
        let q = self.q.forward(p, x)?;
        // the key bias shifts every row of A·Kᵀ by a constant, which the
        // softmax removes; only the weight matters
        let k = x.matmul(&p[self.k.weight.0])?;
        let v = self.v.forward(p, x)?;
        let (b1, b2) = match &self.bias {
            Some(bias) => {
                let (b1, b2) = effective_biases(p, bias, n)?;
                (
                    b1.into_iter().map(Some).collect(),
                    b2.into_iter().map(Some).collect(),
                )
            }
            None => (vec![None; cfg.heads], vec![None; cfg.heads]),
        };
        let dh = cfg.head_dim();
        let scale = T::lit(cfg.scale());
        let pool = match self.latent {
            None => Some(x.tape().constant(pooling_matrix(n, cfg.agents)?)),
            Some(_) => None,
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut stages = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let agents = match (pool, self.latent) {
                (Some(pool), _) => pool.matmul(&qh)?,
                (None, Some(id)) => p[id.0].slice(1, h * dh, dh)?,
                (None, None) => unreachable!("agent source resolved above"),
            };
            let st = agent_mediated(qh, kh, vh, agents, b1[h], b2[h], scale)?;
            heads.push(st.output);
            stages.push(st);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat(&heads, 1)?
        };
        let mut out = self.o.forward(p, merged)?;
        if let (Some(kernel), Some(grid)) = (&self.dwc, grid) {
            out = out.add(&dwc_apply(p, v, grid, kernel)?)?;
        }
        Ok((out, stages))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn naive_softmax_attention(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        s: f64,
    ) -> Tensor<f64> {
        let (n, d) = q.dims2().unwrap();
        let (nk, dv) = v.dims2().unwrap();
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let scores: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() * s)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..nk {
                for c in 0..dv {
                    out[i * dv + c] += w[j] / z * v.at(&[j, c]);
                }
            }
        }
        Tensor::from_parts(vec![n, dv], out)
    }

    #[test]
    fn softmax_attention_single_row_and_uniform() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(t(&[1, 2], &[3.0, -1.0]));
        let q = tape.constant(t(&[1, 2], &[0.3, 0.9]));
        let out = softmax_attention(q, q, v, 0.5).unwrap().value();
        assert_eq!(out.data(), &[3.0, -1.0]);

        let z = tape.constant(Tensor::zeros([3, 2]));
        let v = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let out = softmax_attention(z, z, v, 1.0).unwrap().value();
        for i in 0..3 {
            assert!((out.at(&[i, 0]) - 3.0).abs() < 1e-12);
            assert!((out.at(&[i, 1]) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_attention_matches_double_loop() {
        let mut rng = crate::rng::stream(11, "test");
        let (q, k, v) = (
            uniform::<f64>([3, 2], 1.0, &mut rng),
            uniform::<f64>([3, 2], 1.0, &mut rng),
            uniform::<f64>([3, 2], 1.0, &mut rng),
        );
        let tape = Tape::new();
        let got = softmax_attention(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            0.7,
        )
        .unwrap()
        .value();
        let want = naive_softmax_attention(&q, &k, &v, 0.7);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
        let bad = tape.constant(Tensor::zeros([3, 3]));
        assert!(softmax_attention(tape.constant(q), bad, tape.constant(v), 1.0).is_err());
    }

    #[test]
    fn linear_attention_examples() {
        let tape = Tape::<f64>::new();
        let n = 5;
        let ones = tape.constant(Tensor::ones([n, 1]));
        let out = linear_attention(ones, ones, ones, FeatureMap::Identity)
            .unwrap()
            .value();
        assert!(out.data().iter().all(|&x| (x - n as f64).abs() < 1e-12));
        // φ(1) = 2 under elu + 1
        let out = linear_attention(ones, ones, ones, FeatureMap::EluPlusOne)
            .unwrap()
            .value();
        assert!(out
            .data()
            .iter()
            .all(|&x| (x - 4.0 * n as f64).abs() < 1e-12));

        let mut rng = crate::rng::stream(12, "test");
        let (q, k, v) = (
            uniform::<f64>([4, 2], 1.0, &mut rng),
            uniform::<f64>([4, 2], 1.0, &mut rng),
            uniform::<f64>([4, 2], 1.0, &mut rng),
        );
        let got = linear_attention(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            FeatureMap::EluPlusOne,
        )
        .unwrap()
        .value();
        let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        let mut want = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..4 {
                let w: f64 = (0..2)
                    .map(|c| phi(q.at(&[i, c])) * phi(k.at(&[j, c])))
                    .sum();
                for c in 0..2 {
                    want[i * 2 + c] += w * v.at(&[j, c]);
                }
            }
        }
        let want = Tensor::from_parts(vec![4, 2], want);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
        // left-to-right association
        let qf = tape.constant(q.map(phi));
        let kf = tape.constant(k.map(phi));
        let left = qf
            .matmul(&kf.transpose().unwrap())
            .unwrap()
            .matmul(&tape.constant(v))
            .unwrap();
        assert!(left.value().max_abs_diff(&got).unwrap() < 1e-5);
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        assert_eq!(agent_pool(q, 4).unwrap().value(), q.value());
        assert_eq!(agent_pool(q, 1).unwrap().value().data(), &[4.0, 5.0]);
        assert_eq!(
            agent_pool(q, 2).unwrap().value().data(),
            &[2.0, 3.0, 6.0, 7.0]
        );
        assert!(matches!(
            agent_pool(q, 5),
            Err(Error::TooFewTokens {
                tokens: 4,
                agents: 5
            })
        ));
        assert_eq!(segments(7, 3), vec![(0, 3), (3, 5), (5, 7)]);
    }

    #[test]
    fn resampling_examples() {
        assert_eq!(resample_linear(&[0.0f64, 1.0], 3), vec![0.0, 0.5, 1.0]);
        let base = [0.3f64, -1.0, 2.0, 4.5];
        assert_eq!(resample_linear(&base, 4), base.to_vec());
        let r = resample_linear(&[1.0f64, 3.0, 5.0], 5);
        for (got, want) in r.iter().zip([1.0, 2.0, 3.0, 4.0, 5.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn biases_follow_rank_one_layout() {
        let mut store = ParamStore::<f64>::new();
        let mut cfg = AgentAttentionConfig::new(4, 2, 3);
        cfg.bias_base_len = 2;
        let ids = AgentBias::new(&mut store, "b", &cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (b1, b2) = build_biases(&p, &ids, 5).unwrap();
        assert!(b1.iter().chain(&b2).all(|b| b.value().max_abs() == 0.0));

        store
            .set("b.u1", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        store
            .set("b.v1_base", t(&[2, 2], &[0.0, 1.0, 10.0, 20.0]))
            .unwrap();
        store
            .set("b.u2_base", t(&[2, 2], &[0.0, 4.0, -1.0, 1.0]))
            .unwrap();
        store
            .set("b.v2", t(&[2, 3], &[0.5, 0.0, -0.5, 7.0, 8.0, 9.0]))
            .unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (b1, b2) = build_biases(&p, &ids, 3).unwrap();
        let b1h1 = b1[1].value();
        assert_eq!(b1h1.shape(), &[3, 3]);
        // u1[1, 2] + resample([10, 20])[1]
        assert!((b1h1.at(&[2, 1]) - (6.0 + 15.0)).abs() < 1e-12);
        let b2h0 = b2[0].value();
        assert_eq!(b2h0.shape(), &[3, 3]);
        // resample([0, 4])[2] + v2[0, 0]
        assert!((b2h0.at(&[2, 0]) - (4.0 + 0.5)).abs() < 1e-12);
    }

    fn layer(cfg: AgentAttentionConfig, seed: u64) -> (AgentAttention, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(seed, "init");
        let attn = AgentAttention::new(cfg, &mut store, "attn", &mut rng).unwrap();
        (attn, store)
    }

    #[test]
    fn zero_score_projections_reduce_to_column_mean() {
        let mut cfg = AgentAttentionConfig::new(4, 2, 2);
        cfg.dwc_enabled = false;
        let (attn, mut store) = layer(cfg, 5);
        for name in ["attn.q.weight", "attn.k.weight"] {
            store.set(name, Tensor::zeros([4, 4])).unwrap();
        }
        for name in ["attn.q.bias", "attn.k.bias"] {
            store.set(name, Tensor::zeros([4])).unwrap();
        }
        let mut rng = crate::rng::stream(6, "x");
        let x = uniform::<f64>([7, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let out = attn
            .forward(&p, tape.constant(x.clone()), None)
            .unwrap()
            .value();

        let v = x.matmul(store.by_name("attn.v.weight").unwrap()).unwrap();
        let bv = store.by_name("attn.v.bias").unwrap();
        let mut mean = vec![0.0; 4];
        for i in 0..7 {
            for c in 0..4 {
                mean[c] += (v.at(&[i, c]) + bv.data()[c]) / 7.0;
            }
        }
        let mean = Tensor::from_parts(vec![1, 4], mean);
        let want = mean
            .matmul(store.by_name("attn.o.weight").unwrap())
            .unwrap();
        let bo = store.by_name("attn.o.bias").unwrap();
        for i in 0..7 {
            for c in 0..4 {
                assert!((out.at(&[i, c]) - want.data()[c] - bo.data()[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_token_passes_value_through() {
        let mut cfg = AgentAttentionConfig::new(2, 1, 1);
        cfg.dwc_enabled = false;
        let (attn, store) = layer(cfg, 9);
        let x = t(&[1, 2], &[0.4, -0.8]);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let out = attn
            .forward(&p, tape.constant(x.clone()), None)
            .unwrap()
            .value();
        let v = x
            .matmul(store.by_name("attn.v.weight").unwrap())
            .unwrap()
            .zip_map(
                &store
                    .by_name("attn.v.bias")
                    .unwrap()
                    .reshape([1, 2])
                    .unwrap(),
                "add",
                |a, b| a + b,
            )
            .unwrap();
        let want = v.matmul(store.by_name("attn.o.weight").unwrap()).unwrap();
        let bo = store.by_name("attn.o.bias").unwrap();
        for c in 0..2 {
            assert!((out.data()[c] - want.data()[c] - bo.data()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = AgentAttentionConfig::new(4, 2, 3);
        let (attn, store) = layer(cfg, 1);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let x2 = tape.constant(Tensor::<f64>::zeros([2, 4]));
        assert!(matches!(
            attn.forward(&p, x2, None),
            Err(Error::TooFewTokens {
                tokens: 2,
                agents: 3
            })
        ));
        let x6 = tape.constant(Tensor::<f64>::zeros([6, 4]));
        assert!(matches!(
            attn.forward(&p, x6, Some((2, 2))),
            Err(Error::GridMismatch { .. })
        ));
        assert!(attn.forward(&p, x6, Some((2, 3))).is_ok());
        assert!(AgentAttentionConfig::new(6, 4, 2).validate().is_err());
    }

    #[test]
    fn forward_matches_full_bias_formulation() {
        let cfg = AgentAttentionConfig {
            bias_base_len: 5,
            ..AgentAttentionConfig::new(6, 2, 3)
        };
        let (attn, mut store) = layer(cfg, 12);
        let mut rng = crate::rng::stream(13, "bias");
        for t in store.tensors_mut() {
            *t = uniform(t.shape().to_vec(), 0.7, &mut rng);
        }
        let x = uniform::<f64>([8, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let xv = tape.constant(x);
        let got = attn.forward(&p, xv, Some((2, 4))).unwrap().value();

        let q = attn.q.forward(&p, xv).unwrap();
        let k = attn.k.forward(&p, xv).unwrap();
        let v = attn.v.forward(&p, xv).unwrap();
        let (b1, b2) = build_biases(&p, attn.bias.as_ref().unwrap(), 8).unwrap();
        let pool = tape.constant(pooling_matrix(8, 3).unwrap());
        let heads: Vec<_> = (0..2)
            .map(|h| {
                let qh = q.slice(1, 3 * h, 3).unwrap();
                let agents = pool.matmul(&qh).unwrap();
                agent_mediated(
                    qh,
                    k.slice(1, 3 * h, 3).unwrap(),
                    v.slice(1, 3 * h, 3).unwrap(),
                    agents,
                    Some(b1[h]),
                    Some(b2[h]),
                    1.0 / 3f64.sqrt(),
                )
                .unwrap()
                .output
            })
            .collect();
        let merged = Var::concat(&heads, 1).unwrap();
        let want = attn
            .o
            .forward(&p, merged)
            .unwrap()
            .add(&dwc_apply(&p, v, (2, 4), attn.dwc.as_ref().unwrap()).unwrap())
            .unwrap()
            .value();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}
