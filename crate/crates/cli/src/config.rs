//! Config files and flag overrides. A flag given on the command line always
//! wins over the config file; a flag left at its default never does.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args};
use serde::{Deserialize, Serialize};

use lano_core::attention::AgentSource;
use lano_core::data::DarcyGenConfig;
use lano_core::model::{DecoderKind, LanoConfig};
use lano_core::train::{ScheduleKind, TrainConfig};
use lano_core::DType;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DarcyGenConfig,
    pub model: LanoConfig,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct TrainingView<'a> {
    model: &'a LanoConfig,
    train: &'a TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The `[model]` and `[train]` tables, loadable again with `--config`.
    pub fn training_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(&TrainingView {
            model: &self.model,
            train: &self.train,
        })?)
    }
}

/// Prints the seed and one resolved config table before any work starts.
pub fn echo<C: Serialize>(table: &str, cfg: &C, seed: u64) -> anyhow::Result<()> {
    println!("# seed: {seed}");
    println!("[{table}]");
    print!("{}", toml::to_string(cfg)?);
    Ok(())
}

pub fn echo_run(cfg: &RunConfig) -> anyhow::Result<()> {
    println!("# seed: {}", cfg.train.seed);
    print!("{}", cfg.training_toml()?);
    Ok(())
}

pub fn parse_list<T: FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("bad entry {v:?} in --{what}"))
        })
        .collect()
}

fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

macro_rules! overrides {
    ($m:expr, $( $id:literal => $dst:expr, $src:expr; )*) => {
        $( if given($m, $id) { $dst = $src; } )*
    };
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = DarcyGenConfig::default().n, help = "Grid points per side")]
    pub n: usize,
    #[arg(long, default_value_t = DarcyGenConfig::default().samples, help = "Total samples")]
    pub samples: usize,
    #[arg(long, default_value_t = DarcyGenConfig::default().test_samples, help = "Samples held out for testing")]
    pub test_samples: usize,
    #[arg(long, default_value_t = DarcyGenConfig::default().a_lo, help = "Low permeability value")]
    pub a_lo: f64,
    #[arg(long, default_value_t = DarcyGenConfig::default().a_hi, help = "High permeability value")]
    pub a_hi: f64,
    #[arg(long, default_value_t = DarcyGenConfig::default().seed, help = "Generator seed")]
    pub seed: u64,
    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"], help = "Stored precision")]
    pub dtype: String,
}

impl GenArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut DarcyGenConfig) {
        overrides! { m,
            "n" => cfg.n, self.n;
            "samples" => cfg.samples, self.samples;
            "test_samples" => cfg.test_samples, self.test_samples;
            "a_lo" => cfg.a_lo, self.a_lo;
            "a_hi" => cfg.a_hi, self.a_hi;
            "seed" => cfg.seed, self.seed;
            "dtype" => cfg.dtype, DType::parse(&self.dtype).expect("checked by clap");
        }
    }
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, default_value_t = LanoConfig::default().layers, help = "Attention blocks")]
    pub layers: usize,
    #[arg(long, default_value_t = LanoConfig::default().heads, help = "Attention heads")]
    pub heads: usize,
    #[arg(long, default_value_t = LanoConfig::default().d_model, help = "Model width")]
    pub d_model: usize,
    #[arg(long, default_value_t = LanoConfig::default().agents, help = "Agent tokens")]
    pub agents: usize,
    #[arg(long, default_value_t = LanoConfig::default().ffn_hidden, help = "Feed-forward hidden width")]
    pub ffn_hidden: usize,
    #[arg(long, action = ArgAction::Set, default_value_t = true, help = "Depthwise convolution on V (grid data only)")]
    pub dwc: bool,
    #[arg(long, action = ArgAction::Set, default_value_t = true, help = "Learned attention biases")]
    pub bias: bool,
    #[arg(long, default_value_t = LanoConfig::default().bias_base_len, help = "Base length of the bias vectors")]
    pub bias_base_len: usize,
    #[arg(long, default_value = "query_pooling", value_parser = ["query_pooling", "latent"], help = "Where agent tokens come from")]
    pub agent_source: String,
    #[arg(long, default_value = "linear", value_parser = ["linear", "mlp"], help = "Output decoder")]
    pub decoder: String,
}

impl ModelArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut LanoConfig) -> anyhow::Result<()> {
        let width_given = given(m, "d_model");
        overrides! { m,
            "layers" => cfg.layers, self.layers;
            "heads" => cfg.heads, self.heads;
            "d_model" => cfg.d_model, self.d_model;
            "agents" => cfg.agents, self.agents;
            "ffn_hidden" => cfg.ffn_hidden, self.ffn_hidden;
            "dwc" => cfg.dwc_enabled, self.dwc;
            "bias" => cfg.bias_enabled, self.bias;
            "bias_base_len" => cfg.bias_base_len, self.bias_base_len;
            "agent_source" => cfg.agent_source, match self.agent_source.as_str() {
                "latent" => AgentSource::Latent,
                _ => AgentSource::QueryPooling,
            };
            "decoder" => cfg.decoder, match self.decoder.as_str() {
                "mlp" => DecoderKind::Mlp,
                _ => DecoderKind::Linear,
            };
        }
        // the hidden width tracks the model width unless set explicitly
        if width_given && !given(m, "ffn_hidden") {
            cfg.ffn_hidden = 2 * cfg.d_model;
        }
        if cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
            bail!(
                "--d-model {} is not divisible by --heads {}",
                cfg.d_model,
                cfg.heads
            );
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().epochs, help = "Training epochs")]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().init_lr, help = "Peak learning rate")]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size, help = "Samples per optimizer step")]
    pub batch_size: usize,
    #[arg(long, default_value = "onecycle", value_parser = ["onecycle", "cosine"], help = "Learning-rate schedule")]
    pub schedule: String,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay, help = "Decoupled weight decay")]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().gamma_grad, help = "Weight of the gradient loss term")]
    pub gamma_grad: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed, help = "Run seed (init and shuffling)")]
    pub seed: u64,
    #[arg(long, default_value = "f32", value_parser = ["f32", "f64"], help = "Training precision")]
    pub precision: String,
}

impl TrainArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut TrainConfig) -> anyhow::Result<()> {
        overrides! { m,
            "epochs" => cfg.epochs, self.epochs;
            "lr" => cfg.init_lr, self.lr;
            "batch_size" => cfg.batch_size, self.batch_size;
            "schedule" => cfg.schedule, ScheduleKind::parse(&self.schedule).expect("checked by clap");
            "weight_decay" => cfg.weight_decay, self.weight_decay;
            "gamma_grad" => cfg.gamma_grad, self.gamma_grad;
            "seed" => cfg.seed, self.seed;
            "precision" => cfg.precision, DType::parse(&self.precision).expect("checked by clap");
        }
        cfg.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model.layers = 2;
        cfg.train.epochs = 7;
        let text = cfg.training_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.train, cfg.train);
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list::<usize>("24, 32", "r").unwrap(), vec![24, 32]);
        assert!(parse_list::<usize>("24,x", "r").is_err());
    }
}
