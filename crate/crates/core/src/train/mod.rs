//! Losses, AdamW, learning-rate schedules and the epoch driver.

mod loss;
mod optim;

pub use loss::{
    gradient_loss, gradient_loss_var, relative_l2, relative_l2_var, total_loss, total_loss_var,
};
pub use optim::{adamw_step, lr_schedule, AdamW, OptimState, ScheduleKind};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Normalizer, Sample};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, CheckpointMeta, LanoModel};
use crate::parallel::Parallelism;
use crate::tensor::{DType, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub init_lr: f64,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub weight_decay: f64,
    /// Weight of the gradient term; only used on grid datasets.
    pub gamma_grad: f64,
    pub seed: u64,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            init_lr: 1e-3,
            batch_size: 4,
            schedule: ScheduleKind::OneCycle,
            weight_decay: 1e-5,
            gamma_grad: 0.1,
            seed: 0,
            precision: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return Err(Error::Config(format!(
                "init_lr must be positive, got {}",
                self.init_lr
            )));
        }
        if !(self.gamma_grad >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "gamma_grad and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_rel_l2: f64,
    pub test_rel_l2: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_rel_l2,test_rel_l2,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:.3}",
            self.epoch, self.lr, self.train_rel_l2, self.test_rel_l2, self.wall_seconds
        )
    }
}

/// How a run executes, as opposed to what it computes.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub parallelism: Parallelism,
    /// Directory for `metrics.csv`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Real = f32> {
    /// Parameters after the last epoch.
    pub model: LanoModel<T>,
    /// Parameters at the epoch with the lowest test error.
    pub best: LanoModel<T>,
    pub best_epoch: usize,
    pub best_test_rel_l2: f64,
    pub metrics: Vec<EpochMetrics>,
    pub normalizer: Normalizer,
}

impl<T: Real> TrainReport<T> {
    pub fn final_test_rel_l2(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.test_rel_l2)
    }

    pub fn best_meta(&self, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            dtype: T::DTYPE,
            seed: Some(seed),
            epoch: Some(self.best_epoch),
            test_rel_l2: Some(self.best_test_rel_l2),
            normalization: Some(self.normalizer.clone()),
        }
    }
}

/// Inputs standardized once up front; targets stay physical.
fn normalized_inputs<T: Real>(samples: &[Sample<T>], norm: &Normalizer) -> Vec<Sample<T>> {
    samples
        .iter()
        .map(|s| Sample {
            x: norm.x.normalize(&s.x),
            a: match (&s.a, &norm.a) {
                (Some(a), Some(st)) => Some(st.normalize(a)),
                (a, _) => a.clone(),
            },
            u: s.u.clone(),
        })
        .collect()
}

/// Forward pass from normalized inputs to a prediction in physical units.
fn physical_forward<'t, T: Real>(
    model: &LanoModel<T>,
    p: &[Var<'t, T>],
    s: &Sample<T>,
    norm: &Normalizer,
    grid: Option<(usize, usize)>,
    tape: &'t Tape<T>,
) -> Result<Var<'t, T>> {
    let x = tape.constant(s.x.clone());
    let a = s.a.as_ref().map(|a| tape.constant(a.clone()));
    let out = model.forward(p, x, a, grid)?;
    let du = norm.u.channels();
    let mut diag = vec![T::zero(); du * du];
    for j in 0..du {
        diag[j * du + j] = T::lit(norm.u.std[j]);
    }
    let scale = tape.constant(Tensor::new([du, du], diag)?);
    let shift = tape.constant(Tensor::new(
        [du],
        norm.u.mean.iter().map(|&m| T::lit(m)).collect(),
    )?);
    out.matmul(&scale)?.broadcast_add(&shift)
}

/// Prediction in physical units for one sample given in physical units.
pub fn predict_physical<T: Real>(
    model: &LanoModel<T>,
    norm: &Normalizer,
    sample: &Sample<T>,
    grid: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    let s = normalized_inputs(std::slice::from_ref(sample), norm)
        .pop()
        .expect("one sample");
    let tape = Tape::new();
    let p = model.params().bind_constant(&tape);
    Ok(physical_forward(model, &p, &s, norm, grid, &tape)?.value())
}

/// Mean relative L2 error over `samples` (physical units).
pub fn evaluate<T: Real>(
    model: &LanoModel<T>,
    norm: &Normalizer,
    samples: &[Sample<T>],
    grid: Option<(usize, usize)>,
    par: Parallelism,
) -> Result<f64> {
    let inputs = normalized_inputs(samples, norm);
    mean_error(model, norm, &inputs, grid, par)
}

fn mean_error<T: Real>(
    model: &LanoModel<T>,
    norm: &Normalizer,
    normalized: &[Sample<T>],
    grid: Option<(usize, usize)>,
    par: Parallelism,
) -> Result<f64> {
    if normalized.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let errs = par.map(normalized, |s| {
        let tape = Tape::new();
        let p = model.params().bind_constant(&tape);
        let pred = physical_forward(model, &p, s, norm, grid, &tape)?.value();
        relative_l2(&pred, &s.u)
    });
    let mut sum = 0.0;
    for e in errs {
        sum += e?;
    }
    Ok(sum / normalized.len() as f64)
}

struct StepOutput<T: Real> {
    grads: Vec<Tensor<T>>,
    rel_l2: f64,
    loss: f64,
}

fn sample_step<T: Real>(
    model: &LanoModel<T>,
    s: &Sample<T>,
    norm: &Normalizer,
    grid: Option<(usize, usize)>,
    gamma: f64,
    weight: f64,
) -> Result<StepOutput<T>> {
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let pred = physical_forward(model, &p, s, norm, grid, &tape)?;
    let truth = tape.constant(s.u.clone());
    let rel = relative_l2_var(pred, truth)?;
    let loss = match grid {
        Some(_) if gamma > 0.0 => {
            rel.add(&gradient_loss_var(pred, truth, grid)?.scale(T::lit(gamma)))?
        }
        _ => rel,
    };
    let loss_value = loss.value().item()?.as_f64();
    let rel_value = rel.value().item()?.as_f64();
    if !loss_value.is_finite() {
        return Ok(StepOutput {
            grads: Vec::new(),
            rel_l2: rel_value,
            loss: loss_value,
        });
    }
    loss.scale(T::lit(weight)).backward()?;
    let grads = p
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    Ok(StepOutput {
        grads,
        rel_l2: rel_value,
        loss: loss_value,
    })
}

fn open_metrics(dir: &Path) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(w, "{METRICS_HEADER}")?;
    w.flush()?;
    Ok(w)
}

/// Runs the training loop: shuffled mini-batches, per-sample gradients
/// (computed in parallel, summed in a fixed order), AdamW with the chosen
/// schedule stepped per batch, and a test evaluation after every epoch.
///
/// The result only depends on the model, the data and `cfg`; `opts`
/// changes how fast it is computed, not what is computed.
pub fn train<T: Real>(
    mut model: LanoModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if cfg.precision != T::DTYPE {
        return Err(Error::Config(format!(
            "precision is {} but the model is {}",
            cfg.precision.name(),
            T::DTYPE.name()
        )));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and test splits".into(),
        ));
    }
    data.check_config(model.config())?;
    let grid = data.grid();
    let norm = data.normalizer.clone();
    let train_set = normalized_inputs(&data.train, &norm);
    let test_set = normalized_inputs(&data.test, &norm);
    let par = opts.parallelism;

    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = OptimState::new(model.params().tensors());
    let mut shuffle = crate::rng::stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;

    let mut metrics_out = opts.out_dir.as_deref().map(open_metrics).transpose()?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, f64::INFINITY);
    let start = Instant::now();
    let mut step = 0;
    let mut lr = 0.0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut rel_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = lr_schedule(step, total_steps, cfg.schedule, cfg.init_lr)?;
            let weight = 1.0 / chunk.len() as f64;
            let outs = par.map(chunk, |&i| {
                sample_step(&model, &train_set[i], &norm, grid, cfg.gamma_grad, weight)
            });
            let mut grads: Option<Vec<Tensor<T>>> = None;
            for out in outs {
                let out = match out {
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Diverged {
                            epoch,
                            batch: b,
                            lr,
                        })
                    }
                    other => other?,
                };
                if !out.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        lr,
                    });
                }
                rel_sum += out.rel_l2;
                match &mut grads {
                    None => grads = Some(out.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&out.grads) {
                            crate::kernels::axpy(T::one(), g.data(), a.data_mut());
                        }
                    }
                }
            }
            let grads = grads.expect("non-empty batch");
            adamw_step(
                model.params_mut().tensors_mut(),
                &grads,
                &mut state,
                lr,
                &opt,
            )?;
            if !model.params().tensors().iter().all(Tensor::all_finite) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    lr,
                });
            }
            step += 1;
        }
        let test_rel_l2 = mean_error(&model, &norm, &test_set, grid, par)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_rel_l2: rel_sum / train_set.len() as f64,
            test_rel_l2,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>4}  lr {:.3e}  train {:.4e}  test {:.4e}  {:.1}s",
                row.epoch, row.lr, row.train_rel_l2, row.test_rel_l2, row.wall_seconds
            );
        }
        if let Some(w) = &mut metrics_out {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        if test_rel_l2 < best.2 {
            best = (model.clone(), epoch, test_rel_l2);
            if let Some(dir) = &opts.out_dir {
                let meta = CheckpointMeta {
                    dtype: T::DTYPE,
                    seed: Some(cfg.seed),
                    epoch: Some(epoch),
                    test_rel_l2: Some(test_rel_l2),
                    normalization: Some(norm.clone()),
                };
                save_checkpoint(&model, &meta, &dir.join("best.ckpt"))?;
            }
        }
        metrics.push(row);
    }
    if let Some(dir) = &opts.out_dir {
        let last = metrics.last().expect("at least one epoch");
        let meta = CheckpointMeta {
            dtype: T::DTYPE,
            seed: Some(cfg.seed),
            epoch: Some(last.epoch),
            test_rel_l2: Some(last.test_rel_l2),
            normalization: Some(norm.clone()),
        };
        save_checkpoint(&model, &meta, &dir.join("last.ckpt"))?;
    }
    let (best_model, best_epoch, best_err) = best;
    Ok(TrainReport {
        model,
        best: best_model,
        best_epoch,
        best_test_rel_l2: best_err,
        metrics,
        normalizer: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, load_dataset, DarcyGenConfig};
    use crate::model::LanoConfig;

    fn tiny_data(samples: usize, test: usize) -> (tempfile::TempDir, Dataset<f32>) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DarcyGenConfig {
            n: 8,
            samples,
            test_samples: test,
            seed: 11,
            ..Default::default()
        };
        gen_dataset(&cfg, dir.path(), Parallelism::Sequential).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        (dir, ds)
    }

    fn tiny_model(d: usize) -> LanoModel<f32> {
        let cfg = LanoConfig {
            bias_base_len: 16,
            ..LanoConfig::sized(1, 2, d, 4)
        };
        LanoModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (_dir, ds) = tiny_data(6, 2);
        let model = tiny_model(8);
        let cfg = TrainConfig {
            epochs: 1,
            init_lr: 1e-300,
            weight_decay: 0.0,
            ..Default::default()
        };
        let report = train(model.clone(), &ds, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(report.model.params(), model.params());
        assert_eq!(report.metrics.len(), 1);
    }

    #[test]
    fn memorizes_four_samples() {
        let (_dir, mut ds) = tiny_data(5, 1);
        ds.train.truncate(4);
        let cfg = TrainConfig {
            epochs: 500,
            init_lr: 5e-3,
            gamma_grad: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let report = train(tiny_model(32), &ds, &cfg, &TrainOptions::default()).unwrap();
        let final_train = report.metrics.last().unwrap().train_rel_l2;
        assert!(final_train < 1e-2, "train rel L2 {final_train}");
        let again = evaluate(
            &report.model,
            &report.normalizer,
            &ds.train,
            ds.grid(),
            Parallelism::Sequential,
        )
        .unwrap();
        assert!(again < 1e-2, "{again}");
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let (_dir, ds) = tiny_data(10, 2);
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let out = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(out.path().to_path_buf()),
            ..Default::default()
        };
        let a = train(tiny_model(8), &ds, &cfg, &opts).unwrap();
        let b = train(
            tiny_model(8),
            &ds,
            &cfg,
            &TrainOptions {
                parallelism: Parallelism::Sequential,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.model.params(), b.model.params());
        let strip = |m: &[EpochMetrics]| {
            m.iter()
                .map(|r| (r.epoch, r.lr, r.train_rel_l2, r.test_rel_l2))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        let csv = std::fs::read_to_string(out.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 4);
        let ck = crate::model::load_checkpoint::<f32>(&out.path().join("best.ckpt")).unwrap();
        assert_eq!(ck.meta.test_rel_l2, Some(a.best_test_rel_l2));
        let again = evaluate(
            &ck.model,
            ck.meta.normalization.as_ref().unwrap(),
            &ds.test,
            ds.grid(),
            Parallelism::Threads,
        )
        .unwrap();
        assert_eq!(again, a.best_test_rel_l2);
    }

    #[test]
    fn divergence_reports_position() {
        let (_dir, ds) = tiny_data(6, 2);
        let mut model = tiny_model(8);
        model.params_mut().tensors_mut()[0].data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let err = train(model, &ds, &cfg, &TrainOptions::default()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Diverged {
                    epoch: 1,
                    batch: 0,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn rejects_inconsistent_setups() {
        let (_dir, ds) = tiny_data(6, 2);
        let bad = LanoModel::<f32>::new(
            LanoConfig {
                d_u: 2,
                ..LanoConfig::sized(1, 1, 4, 2)
            },
            0,
        )
        .unwrap();
        assert!(train(bad, &ds, &TrainConfig::default(), &TrainOptions::default()).is_err());
        let cfg = TrainConfig {
            precision: DType::F64,
            ..Default::default()
        };
        assert!(train(tiny_model(8), &ds, &cfg, &TrainOptions::default()).is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            init_lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            gamma_grad: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
