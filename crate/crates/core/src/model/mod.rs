//! The operator network: point-wise MLP encoder, `L` pre-norm agent-attention
//! blocks with feed-forward networks, and a point-wise decoder.
//!
//! Nothing in the parameterization depends on the number of tokens `N`; the
//! only `N`-dependent pieces (agent pooling, bias resampling) are built from
//! the input at call time. One set of weights therefore runs on any
//! discretization with at least `M` points.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::attention::{AgentAttention, AgentAttentionConfig, AgentSource};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanoConfig {
    pub d_x: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub agents: usize,
    pub ffn_hidden: usize,
    pub dwc_enabled: bool,
    pub bias_enabled: bool,
    pub bias_base_len: usize,
    pub agent_source: AgentSource,
    pub decoder: DecoderKind,
}

impl Default for LanoConfig {
    /// The 8/8/128/64 configuration on a 2-D domain with one coefficient and
    /// one output channel.
    fn default() -> Self {
        LanoConfig {
            d_x: 2,
            d_a: 1,
            d_u: 1,
            layers: 8,
            heads: 8,
            d_model: 128,
            agents: 64,
            ffn_hidden: 256,
            dwc_enabled: true,
            bias_enabled: true,
            bias_base_len: 64,
            agent_source: AgentSource::QueryPooling,
            decoder: DecoderKind::Linear,
        }
    }
}

impl LanoConfig {
    /// A config of the given size with `ffn_hidden = 2·d_model`.
    pub fn sized(layers: usize, heads: usize, d_model: usize, agents: usize) -> Self {
        LanoConfig {
            layers,
            heads,
            d_model,
            agents,
            ffn_hidden: 2 * d_model,
            ..Default::default()
        }
    }

    pub fn attention(&self) -> AgentAttentionConfig {
        AgentAttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            agents: self.agents,
            bias_base_len: self.bias_base_len,
            dwc_enabled: self.dwc_enabled,
            bias_enabled: self.bias_enabled,
            agent_source: self.agent_source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x + self.d_a == 0 || self.d_u == 0 {
            return Err(Error::Config(
                "need at least one input and one output channel".into(),
            ));
        }
        if self.layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(
                "layers and ffn_hidden must be positive".into(),
            ));
        }
        self.attention().validate()
    }

    /// Closed-form number of scalar parameters.
    ///
    /// ```text
    /// encoder   (dx+da)·D + D  +  D·D + D
    /// per layer 4·(D·D + D)                  projections
    ///         + 2·H·M + 2·H·N₀               bias vectors (if enabled)
    ///         + 9·D + D                      depthwise conv (if enabled)
    ///         + M·D                          latent agents (if used)
    ///         + 4·D                          two layer norms
    ///         + D·F + F + F·D + D            feed-forward
    /// decoder   D·du + du                    (linear)
    ///           D·D + D + D·du + du          (two-layer)
    /// ```
    pub fn param_count(&self) -> usize {
        let (d, f, h, m, n0) = (
            self.d_model,
            self.ffn_hidden,
            self.heads,
            self.agents,
            self.bias_base_len,
        );
        let din = self.d_x + self.d_a;
        let encoder = din * d + d + d * d + d;
        let mut layer = 4 * (d * d + d) + 4 * d + d * f + f + f * d + d;
        if self.bias_enabled {
            layer += 2 * h * m + 2 * h * n0;
        }
        if self.dwc_enabled {
            layer += 9 * d + d;
        }
        if self.agent_source == AgentSource::Latent {
            layer += m * d;
        }
        let decoder = match self.decoder {
            DecoderKind::Linear => d * self.d_u + self.d_u,
            DecoderKind::Mlp => d * d + d + d * self.d_u + self.d_u,
        };
        encoder + self.layers * layer + decoder
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn_norm: LayerNorm,
    pub attn: AgentAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
enum Decoder {
    Linear(Linear),
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub struct LanoModel<T: Real = f32> {
    cfg: LanoConfig,
    params: ParamStore<T>,
    encoder: Mlp,
    blocks: Vec<Block>,
    decoder: Decoder,
}

impl<T: Real> LanoModel<T> {
    /// Fresh model; weights uniform in `±sqrt(1/fan_in)`, layer norms at
    /// identity, positional bias vectors at zero.
    pub fn new(cfg: LanoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(seed, "init");
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let encoder = Mlp::new(&mut store, "encoder", (cfg.d_x + cfg.d_a, d, d), &mut rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("blocks.{l}");
            let attn_norm = LayerNorm::new(&mut store, &format!("{name}.attn_norm"), d);
            let attn = AgentAttention::new(
                cfg.attention(),
                &mut store,
                &format!("{name}.attn"),
                &mut rng,
            )?;
            let ffn_norm = LayerNorm::new(&mut store, &format!("{name}.ffn_norm"), d);
            let ffn = Mlp::new(
                &mut store,
                &format!("{name}.ffn"),
                (d, cfg.ffn_hidden, d),
                &mut rng,
            );
            blocks.push(Block {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            });
        }
        let decoder = match cfg.decoder {
            DecoderKind::Linear => {
                Decoder::Linear(Linear::new(&mut store, "decoder", d, cfg.d_u, &mut rng))
            }
            DecoderKind::Mlp => {
                Decoder::Mlp(Mlp::new(&mut store, "decoder", (d, d, cfg.d_u), &mut rng))
            }
        };
        Ok(LanoModel {
            cfg,
            params: store,
            encoder,
            blocks,
            decoder,
        })
    }

    pub fn config(&self) -> &LanoConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> LanoModel<U> {
        LanoModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            encoder: self.encoder,
            blocks: self.blocks.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// `f⁽⁰⁾ = MLP([x, a(x)])`, applied point by point.
    pub fn encode<'t>(
        &self,
        p: &[Var<'t, T>],
        x: Var<'t, T>,
        a: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let (n, dx) = x.with_value(|t| t.dims2())?;
        if dx != self.cfg.d_x {
            return Err(Error::shape("encode", &[n, dx], &[n, self.cfg.d_x]));
        }
        let input = match (a, self.cfg.d_a) {
            (None, 0) => x,
            (Some(a), da) if da > 0 => {
                let shape = a.shape();
                if shape != [n, da] {
                    return Err(Error::shape("encode", &shape, &[n, da]));
                }
                Var::concat(&[x, a], 1)?
            }
            (None, da) => {
                return Err(Error::invalid(
                    "encode",
                    format!("model expects {da} coefficient channels"),
                ))
            }
            (Some(_), _) => {
                return Err(Error::invalid("encode", "model takes no coefficient input"))
            }
        };
        self.encoder.forward(p, input)
    }

    /// `f' = f + Attn(LN(f))`, then `f' + FFN(LN(f'))`.
    pub fn block_forward<'t>(
        &self,
        p: &[Var<'t, T>],
        layer: usize,
        f: Var<'t, T>,
        grid: Option<(usize, usize)>,
    ) -> Result<Var<'t, T>> {
        let b = &self.blocks[layer];
        let h = b.attn_norm.forward(p, f)?;
        let f = f.add(&b.attn.forward(p, h, grid)?)?;
        let h = b.ffn_norm.forward(p, f)?;
        f.add(&b.ffn.forward(p, h)?)
    }

    pub fn decode<'t>(&self, p: &[Var<'t, T>], f: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.decoder {
            Decoder::Linear(lin) => lin.forward(p, f),
            Decoder::Mlp(mlp) => mlp.forward(p, f),
        }
    }

    /// Full forward pass on a tape with parameters bound as `p`
    /// (see [`ParamStore::bind`]).
    pub fn forward<'t>(
        &self,
        p: &[Var<'t, T>],
        x: Var<'t, T>,
        a: Option<Var<'t, T>>,
        grid: Option<(usize, usize)>,
    ) -> Result<Var<'t, T>> {
        let (n, _) = x.with_value(|t| t.dims2())?;
        if n < self.cfg.agents {
            return Err(Error::TooFewTokens {
                tokens: n,
                agents: self.cfg.agents,
            });
        }
        let mut f = self.encode(p, x, a)?;
        for l in 0..self.blocks.len() {
            f = self.block_forward(p, l, f, grid)?;
        }
        self.decode(p, f)
    }

    /// Inference on plain tensors.
    pub fn predict(
        &self,
        x: &Tensor<T>,
        a: Option<&Tensor<T>>,
        grid: Option<(usize, usize)>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind_constant(&tape);
        let xv = tape.constant(x.clone());
        let av = a.map(|a| tape.constant(a.clone()));
        Ok(self.forward(&p, xv, av, grid)?.value())
    }

    /// Auto-regressive rollout: each prediction becomes the next coefficient
    /// input. Needs `d_a == d_u`.
    pub fn rollout(
        &self,
        x: &Tensor<T>,
        initial: &Tensor<T>,
        steps: usize,
        grid: Option<(usize, usize)>,
    ) -> Result<Vec<Tensor<T>>> {
        if self.cfg.d_a != self.cfg.d_u {
            return Err(Error::Config(format!(
                "rollout needs d_a == d_u, got {} and {}",
                self.cfg.d_a, self.cfg.d_u
            )));
        }
        let mut state = initial.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            state = self.predict(x, Some(&state), grid)?;
            out.push(state.clone());
        }
        Ok(out)
    }

    /// Zeroes every weight and bias of the attention and feed-forward
    /// branches (layer-norm affines are kept).
    pub fn zero_residual_branches(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with("blocks.") && (n.contains(".attn.") || n.contains(".ffn.")))
            .cloned()
            .collect();
        for name in names {
            let id = self.params.find(&name).expect("listed name");
            let shape = self.params.get(id).shape().to_vec();
            self.params.tensors_mut()[id.0] = Tensor::zeros(shape);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    fn tiny(seed: u64) -> LanoModel<f64> {
        let cfg = LanoConfig {
            d_x: 2,
            d_a: 1,
            d_u: 1,
            bias_base_len: 8,
            ..LanoConfig::sized(2, 2, 8, 2)
        };
        LanoModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn default_configuration_parameter_count() {
        let cfg = LanoConfig::default();
        let model = LanoModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.param_count(), cfg.param_count());
        assert_eq!(cfg.param_count(), 1_103_617);
        let rel = (cfg.param_count() as f64 - 1.104e6).abs() / 1.104e6;
        assert!(rel < 0.15);
    }

    #[test]
    fn closed_form_matches_for_variants() {
        for (dwc, bias, src, dec) in [
            (false, false, AgentSource::Latent, DecoderKind::Mlp),
            (true, false, AgentSource::QueryPooling, DecoderKind::Linear),
            (false, true, AgentSource::Latent, DecoderKind::Linear),
        ] {
            let cfg = LanoConfig {
                dwc_enabled: dwc,
                bias_enabled: bias,
                agent_source: src,
                decoder: dec,
                ..LanoConfig::sized(2, 2, 8, 3)
            };
            let model = LanoModel::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(model.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn encoder_is_pointwise() {
        let model = tiny(3);
        let mut rng = crate::rng::stream(4, "x");
        let x7 = uniform::<f64>([7, 2], 1.0, &mut rng);
        let a7 = uniform::<f64>([7, 1], 1.0, &mut rng);
        let tape = Tape::new();
        let p = model.params().bind_constant(&tape);
        let f7 = model
            .encode(
                &p,
                tape.constant(x7.clone()),
                Some(tape.constant(a7.clone())),
            )
            .unwrap()
            .value();
        let f1 = model
            .encode(
                &p,
                tape.constant(x7.slice_rows(4, 1).unwrap()),
                Some(tape.constant(a7.slice_rows(4, 1).unwrap())),
            )
            .unwrap()
            .value();
        assert_eq!(f1.row(0), f7.row(4));
        assert!(model.encode(&p, tape.constant(x7.clone()), None).is_err());
        assert!(model
            .encode(&p, tape.constant(a7.clone()), Some(tape.constant(a7)))
            .is_err());
    }

    #[test]
    fn encoder_matches_two_matmul_oracle() {
        let model = tiny(5);
        let mut rng = crate::rng::stream(6, "x");
        let x = uniform::<f64>([5, 2], 1.0, &mut rng);
        let a = uniform::<f64>([5, 1], 1.0, &mut rng);
        let tape = Tape::new();
        let p = model.params().bind_constant(&tape);
        let got = model
            .encode(&p, tape.constant(x.clone()), Some(tape.constant(a.clone())))
            .unwrap()
            .value();
        let ps = model.params();
        let w0 = ps.by_name("encoder.0.weight").unwrap();
        let b0 = ps.by_name("encoder.0.bias").unwrap();
        let w1 = ps.by_name("encoder.1.weight").unwrap();
        let b1 = ps.by_name("encoder.1.bias").unwrap();
        for i in 0..5 {
            let input = [x.at(&[i, 0]), x.at(&[i, 1]), a.at(&[i, 0])];
            let hidden: Vec<f64> = (0..8)
                .map(|j| {
                    let z = b0.data()[j] + (0..3).map(|k| input[k] * w0.at(&[k, j])).sum::<f64>();
                    crate::autodiff::gelu_scalar(z)
                })
                .collect();
            for j in 0..8 {
                let want = b1.data()[j] + (0..8).map(|k| hidden[k] * w1.at(&[k, j])).sum::<f64>();
                assert!((got.at(&[i, j]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_branches_make_blocks_identity() {
        let mut model = tiny(7);
        model.zero_residual_branches();
        let mut rng = crate::rng::stream(8, "x");
        let f = uniform::<f64>([6, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let p = model.params().bind_constant(&tape);
        for l in 0..2 {
            let out = model
                .block_forward(&p, l, tape.constant(f.clone()), Some((2, 3)))
                .unwrap();
            assert_eq!(out.value(), f);
        }
    }

    #[test]
    fn decoder_examples() {
        let cfg = LanoConfig {
            d_u: 4,
            ..LanoConfig::sized(1, 1, 4, 1)
        };
        let mut model = LanoModel::<f64>::new(cfg, 0).unwrap();
        let mut rng = crate::rng::stream(9, "x");
        let f = uniform::<f64>([3, 4], 1.0, &mut rng);
        model
            .params_mut()
            .set("decoder.weight", Tensor::eye(4))
            .unwrap();
        model
            .params_mut()
            .set("decoder.bias", Tensor::zeros([4]))
            .unwrap();
        let tape = Tape::new();
        let p = model.params().bind_constant(&tape);
        assert_eq!(
            model.decode(&p, tape.constant(f.clone())).unwrap().value(),
            f
        );
        model
            .params_mut()
            .set("decoder.weight", Tensor::zeros([4, 4]))
            .unwrap();
        let tape = Tape::new();
        let p = model.params().bind_constant(&tape);
        assert_eq!(
            model
                .decode(&p, tape.constant(f))
                .unwrap()
                .value()
                .max_abs(),
            0.0
        );
    }

    #[test]
    fn all_zero_parameters_predict_zero() {
        let mut model = tiny(10);
        for t in model.params_mut().tensors_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let x = Tensor::<f64>::full([6, 2], 0.5);
        let a = Tensor::<f64>::full([6, 1], 3.0);
        let y = model.predict(&x, Some(&a), Some((2, 3))).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn too_few_tokens_names_both_counts() {
        let model = tiny(11);
        let x = Tensor::<f64>::zeros([1, 2]);
        let a = Tensor::<f64>::zeros([1, 1]);
        let err = model.predict(&x, Some(&a), None).unwrap_err();
        assert!(matches!(
            err,
            Error::TooFewTokens {
                tokens: 1,
                agents: 2
            }
        ));
        assert!(err.to_string().contains('1') && err.to_string().contains('2'));
    }

    #[test]
    fn rollout_feeds_predictions_back() {
        let cfg = LanoConfig {
            d_x: 2,
            d_a: 1,
            d_u: 1,
            ..LanoConfig::sized(1, 1, 4, 2)
        };
        let model = LanoModel::<f64>::new(cfg, 2).unwrap();
        let x = Tensor::<f64>::full([4, 2], 0.1);
        let u0 = Tensor::<f64>::full([4, 1], 1.0);
        let seq = model.rollout(&x, &u0, 3, Some((2, 2))).unwrap();
        assert_eq!(seq.len(), 3);
        let step2 = model.predict(&x, Some(&seq[0]), Some((2, 2))).unwrap();
        assert_eq!(step2, seq[1]);
        let bad = LanoModel::<f64>::new(
            LanoConfig {
                d_u: 2,
                ..LanoConfig::sized(1, 1, 4, 2)
            },
            0,
        )
        .unwrap();
        assert!(bad.rollout(&x, &u0, 1, None).is_err());
    }
}
