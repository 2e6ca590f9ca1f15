mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

use lano_core::attention::AttentionVariant;
use lano_core::bench::{
    self, agent_count_ablation, component_ablation, mean_by_label, scaling_sweep, zero_shot_eval,
    Component, EvalSet, TimingConfig,
};
use lano_core::data::{gen_dataset, load_dataset, refine_test_split, Dataset};
use lano_core::gradcheck::{run_suite, SUITE_STEP};
use lano_core::model::{load_checkpoint, LanoModel};
use lano_core::parallel::{env_thread_cap, with_thread_cap};
use lano_core::train::{evaluate, train, TrainOptions};
use lano_core::{DType, Parallelism, Real};

use config::{parse_list, GenArgs, ModelArgs, RunConfig, TrainArgs};

/// Gradient-check failure threshold on the worst relative error.
const GRAD_CHECK_LIMIT: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "lano",
    version,
    about = "Agent-attention neural operator toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Darcy-flow dataset
    GenDarcy {
        #[arg(long, help = "TOML file with a [data] table")]
        config: Option<PathBuf>,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, help = "Output directory")]
        out: PathBuf,
    },
    /// Train a model and write metrics.csv, best.ckpt and last.ckpt
    Train {
        #[arg(long, help = "TOML file with [model] and [train] tables")]
        config: Option<PathBuf>,
        #[arg(long, help = "Dataset directory")]
        data: PathBuf,
        #[arg(long, help = "Run directory")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, help = "Suppress per-epoch progress")]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset's test split
    Eval {
        #[arg(
            long,
            help = "Checkpoint file, or run directory / name without extension"
        )]
        ckpt: PathBuf,
        #[arg(long, help = "Dataset directory")]
        data: PathBuf,
    },
    /// Evaluate a checkpoint at other grid resolutions without retraining
    ZeroShot {
        #[arg(
            long,
            help = "Checkpoint file, or run directory / name without extension"
        )]
        ckpt: PathBuf,
        #[arg(long, help = "Generated grid dataset directory")]
        data: PathBuf,
        #[arg(long, default_value = "24,32", help = "Grid sizes to evaluate at")]
        resolutions: String,
        #[arg(long, help = "CSV output file")]
        out: Option<PathBuf>,
    },
    /// Time attention kernels over a sweep of token counts
    BenchAttn {
        #[arg(long, default_value = "agent,softmax,linear", help = "Kernels to time")]
        variants: String,
        #[arg(long, default_value = "256,512,1024,2048,4096", help = "Token counts")]
        ns: String,
        #[arg(long, default_value_t = 32, help = "Agent tokens")]
        agents: usize,
        #[arg(long, default_value_t = 64, help = "Model width")]
        d_model: usize,
        #[arg(long, default_value_t = 4, help = "Heads")]
        heads: usize,
        #[arg(long, default_value_t = 5, help = "Timed repetitions per point")]
        reps: usize,
        #[arg(long, default_value_t = 2, help = "Untimed warm-up runs per point")]
        warmups: usize,
        #[arg(long, default_value_t = 0, help = "Seed for the random inputs")]
        seed: u64,
        #[arg(long, help = "CSV output file")]
        out: Option<PathBuf>,
    },
    /// Train ablation variants and tabulate their test errors
    Ablate {
        #[arg(long, help = "TOML file with [model] and [train] tables")]
        config: Option<PathBuf>,
        #[arg(long, help = "Dataset directory")]
        data: PathBuf,
        #[arg(long, default_value = "components", value_parser = ["components", "agents"], help = "Which study to run")]
        study: String,
        #[arg(
            long,
            default_value = "reference,no_bias,no_dwc,no_bias_no_dwc,latent_agents",
            help = "Component variants"
        )]
        variants: String,
        #[arg(long, default_value = "1,2,3", help = "Seeds for the component study")]
        seeds: String,
        #[arg(
            long,
            default_value = "4,8,16,32",
            help = "Agent counts for the agent study"
        )]
        agent_counts: String,
        #[arg(long, help = "CSV output file")]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the finite-difference gradient suite
    GradCheck {
        #[arg(long, default_value_t = 5, help = "Random draws per case")]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let sub = matches
        .subcommand()
        .map(|(_, m)| m.clone())
        .expect("a subcommand is required");
    match with_thread_cap(env_thread_cap(), || run(cli.command, &sub)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command, m: &ArgMatches) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenDarcy { config, gen, out } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            gen.apply(m, &mut cfg.data);
            cfg.data.validate()?;
            config::echo("data", &cfg.data, cfg.data.seed)?;
            let manifest = gen_dataset(&cfg.data, &out, Parallelism::Threads)?;
            println!(
                "wrote {} train + {} test samples on a {}x{} grid to {}",
                manifest.train.samples,
                manifest.test.samples,
                cfg.data.n,
                cfg.data.n,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            model,
            train: targs,
            quiet,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            model.apply(m, &mut cfg.model)?;
            targs.apply(m, &mut cfg.train)?;
            match cfg.train.precision {
                DType::F32 => train_command::<f32>(cfg, &data, &out, quiet)?,
                DType::F64 => train_command::<f64>(cfg, &data, &out, quiet)?,
            }
        }
        Command::Eval { ckpt, data } => {
            let path = resolve_checkpoint(&ckpt)?;
            match load_checkpoint::<f32>(&path)?.meta.dtype {
                DType::F32 => eval_command::<f32>(&path, &data)?,
                DType::F64 => eval_command::<f64>(&path, &data)?,
            }
        }
        Command::ZeroShot {
            ckpt,
            data,
            resolutions,
            out,
        } => {
            let path = resolve_checkpoint(&ckpt)?;
            let res: Vec<usize> = parse_list(&resolutions, "resolutions")?;
            match load_checkpoint::<f32>(&path)?.meta.dtype {
                DType::F32 => zero_shot_command::<f32>(&path, &data, &res, out.as_deref())?,
                DType::F64 => zero_shot_command::<f64>(&path, &data, &res, out.as_deref())?,
            }
        }
        Command::BenchAttn {
            variants,
            ns,
            agents,
            d_model,
            heads,
            reps,
            warmups,
            seed,
            out,
        } => {
            let variants = variants
                .split(',')
                .map(|s| {
                    AttentionVariant::parse(s.trim())
                        .with_context(|| format!("unknown attention variant {s:?}"))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let ns: Vec<usize> = parse_list(&ns, "ns")?;
            let timing = TimingConfig { warmups, reps };
            let header = vec![
                ("ns", format!("{ns:?}")),
                ("agents", agents.to_string()),
                ("d_model", d_model.to_string()),
                ("heads", heads.to_string()),
                ("reps", reps.to_string()),
                ("warmups", warmups.to_string()),
                ("seed", seed.to_string()),
            ];
            for (k, v) in &header {
                println!("# {k}: {v}");
            }
            let mut rows = Vec::new();
            for v in variants {
                let sweep = scaling_sweep(v, &ns, agents, d_model, heads, &timing, seed)?;
                for r in &sweep.results {
                    println!("{}", r.csv_row());
                }
                println!("{} slope {:.3}", v.name(), sweep.slope);
                rows.extend(sweep.results.iter().map(|r| r.csv_row()));
            }
            if let Some(out) = out {
                bench::write_csv(&out, &header, bench::SWEEP_COLUMNS, &rows)?;
            }
        }
        Command::Ablate {
            config,
            data,
            study,
            variants,
            seeds,
            agent_counts,
            out,
            model,
            train: targs,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            model.apply(m, &mut cfg.model)?;
            targs.apply(m, &mut cfg.train)?;
            let study = Study {
                components: study == "components",
                variants: variants
                    .split(',')
                    .map(|s| {
                        Component::parse(s.trim())
                            .with_context(|| format!("unknown ablation variant {s:?}"))
                    })
                    .collect::<anyhow::Result<_>>()?,
                seeds: parse_list(&seeds, "seeds")?,
                agent_counts: parse_list(&agent_counts, "agent-counts")?,
            };
            match cfg.train.precision {
                DType::F32 => ablate_command::<f32>(cfg, &data, &study, out.as_deref())?,
                DType::F64 => ablate_command::<f64>(cfg, &data, &study, out.as_deref())?,
            }
        }
        Command::GradCheck { seeds } => {
            println!("# seeds: {seeds}");
            println!("# step: {SUITE_STEP:e}");
            let cases = run_suite(seeds)?;
            let mut worst = ("", 0.0f64);
            for c in &cases {
                println!("{:<24} {:.3e}", c.name, c.max_rel_error);
                if c.max_rel_error.is_nan() || c.max_rel_error > worst.1 {
                    worst = (&c.name, c.max_rel_error);
                }
            }
            println!("worst {} {:.3e}", worst.0, worst.1);
            if worst.1.is_nan() || worst.1 >= GRAD_CHECK_LIMIT {
                eprintln!(
                    "gradient check failed: {:.3e} >= {GRAD_CHECK_LIMIT:e}",
                    worst.1
                );
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Accepts a checkpoint file, a path missing its `.ckpt` extension, or a run
/// directory (which resolves to its `best.ckpt`).
fn resolve_checkpoint(path: &Path) -> anyhow::Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_dir() && path.join("best.ckpt").is_file() {
        return Ok(path.join("best.ckpt"));
    }
    let with_ext = path.with_extension("ckpt");
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    bail!("no checkpoint at {}", path.display())
}

fn load_data<T: Real>(cfg: &mut RunConfig, path: &Path) -> anyhow::Result<Dataset<T>> {
    let data =
        load_dataset::<T>(path).with_context(|| format!("loading dataset {}", path.display()))?;
    data.adapt_config(&mut cfg.model);
    cfg.model.validate()?;
    cfg.train.validate()?;
    data.check_config(&cfg.model)?;
    Ok(data)
}

fn train_command<T: Real>(
    mut cfg: RunConfig,
    data_dir: &Path,
    out: &Path,
    quiet: bool,
) -> anyhow::Result<()> {
    let data = load_data::<T>(&mut cfg, data_dir)?;
    config::echo_run(&cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.training_toml()?)?;
    let model = LanoModel::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    println!("parameters: {}", model.param_count());
    let opts = TrainOptions {
        parallelism: Parallelism::Threads,
        out_dir: Some(out.to_path_buf()),
        verbose: !quiet,
    };
    let report = train(model, &data, &cfg.train, &opts)?;
    println!(
        "final test_rel_l2 {:e}; best {:e} at epoch {}",
        report.final_test_rel_l2(),
        report.best_test_rel_l2,
        report.best_epoch
    );
    Ok(())
}

fn eval_command<T: Real>(path: &Path, data_dir: &Path) -> anyhow::Result<()> {
    let ck = load_checkpoint::<T>(path)?;
    let mut cfg = RunConfig {
        model: ck.model.config().clone(),
        ..Default::default()
    };
    cfg.train.precision = T::DTYPE;
    let data = load_data::<T>(&mut cfg, data_dir)?;
    let seed = ck.meta.seed.unwrap_or_default();
    config::echo("model", ck.model.config(), seed)?;
    let norm = ck
        .meta
        .normalization
        .clone()
        .unwrap_or_else(|| data.normalizer.clone());
    let err = evaluate(
        &ck.model,
        &norm,
        &data.test,
        data.grid(),
        Parallelism::Threads,
    )?;
    if let Some(rec) = ck.meta.test_rel_l2 {
        println!(
            "recorded test_rel_l2 {rec:e} (epoch {})",
            ck.meta.epoch.unwrap_or_default()
        );
    }
    println!("test_rel_l2 {err:e}");
    Ok(())
}

fn zero_shot_command<T: Real>(
    path: &Path,
    data_dir: &Path,
    res: &[usize],
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = load_checkpoint::<T>(path)?;
    let data = load_dataset::<T>(data_dir)?;
    let seed = ck.meta.seed.unwrap_or_default();
    config::echo("model", ck.model.config(), seed)?;
    let norm = ck
        .meta
        .normalization
        .clone()
        .unwrap_or_else(|| data.normalizer.clone());
    let (n, _) = data
        .grid()
        .context("zero-shot evaluation needs a grid dataset")?;
    let refined = res
        .iter()
        .map(|&r| Ok((r, refine_test_split(&data, r, Parallelism::Threads)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut sets = vec![EvalSet {
        label: format!("{n}x{n}"),
        samples: &data.test,
        grid: data.grid(),
    }];
    sets.extend(refined.iter().map(|(r, s)| EvalSet {
        label: format!("{r}x{r}"),
        samples: s,
        grid: Some((*r, *r)),
    }));
    let rows = zero_shot_eval(&ck.model, &norm, &sets, Parallelism::Threads)?;
    let csv: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{:e}", r.label, r.tokens, r.test_rel_l2))
        .collect();
    println!("resolution,tokens,test_rel_l2");
    for line in &csv {
        println!("{line}");
    }
    if let Some(out) = out {
        let header = [
            ("checkpoint", path.display().to_string()),
            ("seed", seed.to_string()),
        ];
        bench::write_csv(out, &header, "resolution,tokens,test_rel_l2", &csv)?;
    }
    Ok(())
}

struct Study {
    components: bool,
    variants: Vec<Component>,
    seeds: Vec<u64>,
    agent_counts: Vec<usize>,
}

fn ablate_command<T: Real>(
    mut cfg: RunConfig,
    data_dir: &Path,
    study: &Study,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let data = load_data::<T>(&mut cfg, data_dir)?;
    config::echo_run(&cfg)?;
    let opts = TrainOptions {
        parallelism: Parallelism::Threads,
        out_dir: None,
        verbose: false,
    };
    let rows = if study.components {
        component_ablation(
            &data,
            &cfg.model,
            &study.variants,
            &study.seeds,
            &cfg.train,
            &opts,
        )?
    } else {
        agent_count_ablation(&data, &study.agent_counts, &cfg.model, &cfg.train, &opts)?
    };
    let csv: Vec<String> = rows.iter().map(|r| r.csv_row()).collect();
    println!("{}", bench::ABLATION_COLUMNS);
    for line in &csv {
        println!("{line}");
    }
    for (label, mean) in mean_by_label(&rows) {
        println!("mean {label} {mean:e}");
    }
    if let Some(out) = out {
        let header = [
            ("config", cfg.training_toml()?.replace('\n', " ")),
            ("seed", format!("{:?}", study.seeds)),
        ];
        bench::write_csv(out, &header, bench::ABLATION_COLUMNS, &csv)?;
    }
    Ok(())
}
