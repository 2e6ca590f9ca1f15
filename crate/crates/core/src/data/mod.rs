//! Synthetic Darcy-flow data, the dataset directory format and loading.
//!
//! A dataset directory holds `manifest.toml` and one tensor file per split
//! and field. Every tensor file is a rank-3 `[samples × N × channels]`
//! tensor in the crate's binary tensor format:
//!
//! ```toml
//! format_version = 1
//! samples = 240           # train + test
//! d_x = 2                 # coordinate channels
//! d_a = 1                 # coefficient channels (0 for none)
//! d_u = 1                 # solution channels
//! dtype = "f64"           # precision of the tensor files
//! grid = [16, 16]         # omit for point clouds; rows * cols == N
//!
//! [train]
//! samples = 200
//! x = "train_x.tensor"
//! a = "train_a.tensor"    # omit when d_a = 0
//! u = "train_u.tensor"
//!
//! [test]
//! samples = 40
//! x = "test_x.tensor"
//! a = "test_a.tensor"
//! u = "test_u.tensor"
//! ```
//!
//! Optional `[normalization]` (per-channel `mean`/`std` for `x`, `a`, `u`)
//! and `[generator]` tables may follow. Grid tokens are row-major; the
//! first coordinate runs along rows. External data (point clouds, meshes)
//! can be converted by writing the same files without `grid`; depthwise
//! convolution is then switched off.

mod coefficient;
mod normalize;
mod solver;

pub use coefficient::{
    box_blur, gen_coefficient, gen_coefficient_valued, resample_grid, A_HI, A_LO,
};
pub use normalize::{ChannelStats, Normalizer};
pub use solver::{darcy_residual, grid_field, solve_darcy_fd, CG_TOLERANCE};

use std::collections::HashSet;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LanoConfig;
use crate::parallel::Parallelism;
use crate::tensor::{DType, Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcyGenConfig {
    pub n: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub a_lo: f64,
    pub a_hi: f64,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for DarcyGenConfig {
    fn default() -> Self {
        DarcyGenConfig {
            n: 16,
            samples: 240,
            test_samples: 40,
            a_lo: A_LO,
            a_hi: A_HI,
            seed: 0,
            dtype: DType::F64,
        }
    }
}

impl DarcyGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::Config(format!(
                "grid size n = {} is below 8",
                self.n
            )));
        }
        if !(self.a_lo > 0.0 && self.a_hi > 0.0) {
            return Err(Error::Config("coefficient values must be positive".into()));
        }
        if self.test_samples == 0 || self.test_samples >= self.samples {
            return Err(Error::Config(format!(
                "need 0 < test_samples < samples, got {} of {}",
                self.test_samples, self.samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub samples: usize,
    pub x: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<String>,
    pub u: String,
}

impl SplitFiles {
    fn standard(split: &str, samples: usize, with_a: bool) -> Self {
        SplitFiles {
            samples,
            x: format!("{split}_x.tensor"),
            a: with_a.then(|| format!("{split}_a.tensor")),
            u: format!("{split}_u.tensor"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: usize,
    pub d_x: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    pub train: SplitFiles,
    pub test: SplitFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<DarcyGenConfig>,
}

/// One input/output pair; `x: [N×d_x]`, `a: [N×d_a]`, `u: [N×d_u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Real = f32> {
    pub x: Tensor<T>,
    pub a: Option<Tensor<T>>,
    pub u: Tensor<T>,
}

impl<T: Real> Sample<T> {
    pub fn tokens(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn cast<U: Real>(&self) -> Sample<U> {
        Sample {
            x: self.x.cast(),
            a: self.a.as_ref().map(Tensor::cast),
            u: self.u.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T: Real = f32> {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
    pub normalizer: Normalizer,
}

impl<T: Real> Dataset<T> {
    pub fn grid(&self) -> Option<(usize, usize)> {
        self.manifest.grid.map(|[r, c]| (r, c))
    }

    pub fn tokens(&self) -> usize {
        self.train
            .first()
            .or(self.test.first())
            .map_or(0, Sample::tokens)
    }

    /// Points a model config at this dataset's channels. Depthwise
    /// convolution needs a grid, so it is switched off for point clouds.
    pub fn adapt_config(&self, cfg: &mut LanoConfig) {
        cfg.d_x = self.manifest.d_x;
        cfg.d_a = self.manifest.d_a;
        cfg.d_u = self.manifest.d_u;
        if self.grid().is_none() {
            cfg.dwc_enabled = false;
        }
    }

    /// Checks that a model config matches the channel layout.
    pub fn check_config(&self, cfg: &LanoConfig) -> Result<()> {
        let m = &self.manifest;
        if (cfg.d_x, cfg.d_a, cfg.d_u) != (m.d_x, m.d_a, m.d_u) {
            return Err(Error::Config(format!(
                "model channels (d_x, d_a, d_u) = ({}, {}, {}) but dataset has ({}, {}, {})",
                cfg.d_x, cfg.d_a, cfg.d_u, m.d_x, m.d_a, m.d_u
            )));
        }
        if self.tokens() < cfg.agents {
            return Err(Error::TooFewTokens {
                tokens: self.tokens(),
                agents: cfg.agents,
            });
        }
        Ok(())
    }
}

/// Node coordinates of an `n×n` grid on `[0,1]²`, row-major, `[n²×2]`.
pub fn grid_coordinates<T: Real>(rows: usize, cols: usize) -> Tensor<T> {
    let (hr, hc) = (1.0 / (rows - 1) as f64, 1.0 / (cols - 1) as f64);
    let mut data = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            data.push(T::lit(r as f64 * hr));
            data.push(T::lit(c as f64 * hc));
        }
    }
    Tensor::from_parts(vec![rows * cols, 2], data)
}

/// Solves one Darcy problem with unit forcing on coefficient `a: [n×n]`
/// and returns it as a grid sample.
pub fn darcy_sample(a: &Tensor<f64>) -> Result<Sample<f64>> {
    let n = a.shape()[0];
    let u = solve_darcy_fd(a, &Tensor::ones([n, n]))?;
    Ok(Sample {
        x: grid_coordinates(n, n),
        a: Some(a.reshape([n * n, 1])?),
        u: u.reshape([n * n, 1])?,
    })
}

fn coefficient_seed(seed: u64, index: usize) -> u64 {
    crate::rng::indexed_stream(seed, "darcy.sample", index as u64).gen()
}

/// Generates a synthetic Darcy dataset into `out_dir` and returns its
/// manifest. Samples are generated in parallel; the files only depend on
/// `cfg`.
pub fn gen_dataset(
    cfg: &DarcyGenConfig,
    out_dir: &Path,
    par: Parallelism,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let samples: Vec<Sample<f64>> = par
        .map_range(cfg.samples, |i| {
            let a =
                gen_coefficient_valued(coefficient_seed(cfg.seed, i), cfg.n, cfg.a_lo, cfg.a_hi);
            darcy_sample(&a)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    order.shuffle(&mut crate::rng::stream(cfg.seed, "darcy.split"));
    let n_train = cfg.samples - cfg.test_samples;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&order[..n_train]), pick(&order[n_train..]));
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        samples: cfg.samples,
        d_x: 2,
        d_a: 1,
        d_u: 1,
        dtype: cfg.dtype,
        grid: Some([cfg.n, cfg.n]),
        train: SplitFiles::standard("train", n_train, true),
        test: SplitFiles::standard("test", cfg.test_samples, true),
        normalization: None,
        generator: Some(cfg.clone()),
    };
    write_dataset(out_dir, &manifest, &train, &test)?;
    Ok(manifest)
}

fn write_tensor(path: &Path, t: &Tensor<f64>, dtype: DType) -> Result<()> {
    let bytes = match dtype {
        DType::F32 => t.cast::<f32>().to_bytes(),
        DType::F64 => t.to_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `manifest.toml` plus the split tensors named in `manifest`.
pub fn write_dataset<T: Real>(
    dir: &Path,
    manifest: &DatasetManifest,
    train: &[Sample<T>],
    test: &[Sample<T>],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (files, samples) in [(&manifest.train, train), (&manifest.test, test)] {
        if files.samples != samples.len() || samples.is_empty() {
            return Err(Error::Config(format!(
                "split {} declares {} samples but {} were given",
                files.x,
                files.samples,
                samples.len()
            )));
        }
        let stack =
            |get: &dyn Fn(&Sample<T>) -> Option<Tensor<f64>>| -> Result<Option<Tensor<f64>>> {
                let parts: Option<Vec<_>> = samples.iter().map(get).collect();
                parts.map(|p| Tensor::stack(&p)).transpose()
            };
        let x = stack(&|s| Some(s.x.cast()))?.expect("x present");
        write_tensor(&dir.join(&files.x), &x, manifest.dtype)?;
        if let Some(name) = &files.a {
            let a = stack(&|s| s.a.as_ref().map(Tensor::cast))?.ok_or_else(|| {
                Error::Config("coefficient file declared but samples have none".into())
            })?;
            write_tensor(&dir.join(name), &a, manifest.dtype)?;
        }
        let u = stack(&|s| Some(s.u.cast()))?.expect("u present");
        write_tensor(&dir.join(&files.u), &u, manifest.dtype)?;
    }
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Accepts a dataset directory or a manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

fn read_split_tensor<T: Real>(
    path: &Path,
    dtype: DType,
    samples: usize,
    tokens: Option<usize>,
    channels: usize,
) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    if bytes.len() > 9 && DType::from_code(bytes[9]).is_some_and(|d| d != dtype) {
        return Err(Error::format(
            path,
            format!(
                "stored as {} but the manifest declares {}",
                DType::from_code(bytes[9]).unwrap().name(),
                dtype.name()
            ),
        ));
    }
    let t = Tensor::<T>::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let shape = t.shape();
    let ok = shape.len() == 3
        && shape[0] == samples
        && tokens.is_none_or(|n| shape[1] == n)
        && shape[2] == channels;
    if !ok {
        return Err(Error::format(
            path,
            format!(
                "shape {shape:?} does not match [{samples}, {}, {channels}]",
                tokens.map_or("N".to_string(), |n| n.to_string())
            ),
        ));
    }
    Ok(t)
}

fn load_split<T: Real>(
    dir: &Path,
    m: &DatasetManifest,
    files: &SplitFiles,
    tokens: &mut Option<usize>,
) -> Result<Vec<Sample<T>>> {
    if files.samples == 0 {
        return Err(Error::format(dir.join(&files.x), "split is empty"));
    }
    let x = read_split_tensor::<T>(&dir.join(&files.x), m.dtype, files.samples, *tokens, m.d_x)?;
    *tokens = Some(x.shape()[1]);
    let a = match (&files.a, m.d_a) {
        (Some(name), da) if da > 0 => Some(read_split_tensor::<T>(
            &dir.join(name),
            m.dtype,
            files.samples,
            *tokens,
            da,
        )?),
        (None, 0) => None,
        _ => {
            return Err(Error::format(
                dir.join(MANIFEST_FILE),
                format!("d_a = {} disagrees with the coefficient file entry", m.d_a),
            ))
        }
    };
    let u = read_split_tensor::<T>(&dir.join(&files.u), m.dtype, files.samples, *tokens, m.d_u)?;
    (0..files.samples)
        .map(|i| {
            Ok(Sample {
                x: x.index_outer(i)?,
                a: a.as_ref().map(|a| a.index_outer(i)).transpose()?,
                u: u.index_outer(i)?,
            })
        })
        .collect()
}

fn input_hash<T: Real>(s: &Sample<T>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in s.x.data().iter().chain(s.a.iter().flat_map(|a| a.data())) {
        v.as_f64().to_bits().hash(&mut h);
    }
    h.finish()
}

/// Loads and validates a dataset; normalization statistics are fitted on
/// the training split when the manifest carries none.
pub fn load_dataset<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    if manifest.train.samples + manifest.test.samples != manifest.samples {
        return Err(Error::format(
            &mpath,
            format!(
                "samples = {} but splits hold {} + {}",
                manifest.samples, manifest.train.samples, manifest.test.samples
            ),
        ));
    }
    if manifest.d_x + manifest.d_a == 0 || manifest.d_u == 0 {
        return Err(Error::format(&mpath, "need input and output channels"));
    }
    let mut tokens = None;
    let train = load_split::<T>(dir, &manifest, &manifest.train, &mut tokens)?;
    let test = load_split::<T>(dir, &manifest, &manifest.test, &mut tokens)?;
    let n = tokens.unwrap_or(0);
    if let Some([r, c]) = manifest.grid {
        if r * c != n || r < 2 || c < 2 {
            return Err(Error::GridMismatch {
                rows: r,
                cols: c,
                tokens: n,
            });
        }
    }
    let seen: HashSet<u64> = train.iter().map(input_hash).collect();
    if let Some(i) = test.iter().position(|s| seen.contains(&input_hash(s))) {
        return Err(Error::format(
            &mpath,
            format!("test sample {i} also appears in the training split"),
        ));
    }
    let normalizer = match &manifest.normalization {
        Some(n) => n.clone(),
        None => Normalizer::fit(&train).expect("non-empty split"),
    };
    if normalizer.x.channels() != manifest.d_x || normalizer.u.channels() != manifest.d_u {
        return Err(Error::format(
            &mpath,
            "normalization statistics do not match the channel counts",
        ));
    }
    Ok(Dataset {
        manifest,
        train,
        test,
        normalizer,
    })
}

/// Test split of a generated dataset carried over to an `m×m` grid: each
/// coefficient is bilinearly resampled, snapped back to its two values, and
/// the problem is re-solved at the new resolution.
pub fn refine_test_split<T: Real>(
    ds: &Dataset<T>,
    m: usize,
    par: Parallelism,
) -> Result<Vec<Sample<T>>> {
    let gen = ds.manifest.generator.as_ref().ok_or_else(|| {
        Error::Config("resolution transfer needs a generated dataset (no [generator] table)".into())
    })?;
    let [n, _] = ds
        .manifest
        .grid
        .ok_or_else(|| Error::Config("resolution transfer needs a grid dataset".into()))?;
    let mid = 0.5 * (gen.a_lo + gen.a_hi);
    par.map(&ds.test, |s| {
        let a =
            s.a.as_ref()
                .ok_or_else(|| Error::Config("sample has no coefficient".into()))?
                .cast::<f64>()
                .reshape([n, n])?;
        let fine = resample_grid(&a, m)?.map(|v| if v > mid { gen.a_hi } else { gen.a_lo });
        Ok(darcy_sample(&fine)?.cast())
    })
    .into_iter()
    .collect()
}
