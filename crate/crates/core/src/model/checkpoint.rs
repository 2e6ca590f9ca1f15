//! Checkpoint files.
//!
//! Layout: the 8-byte magic `LANOCKPT`, a version byte, a little-endian
//! `u64` length followed by that many bytes of TOML (model config plus run
//! metadata), a `u64` tensor count, then for each parameter a `u64` name
//! length, the UTF-8 name and the tensor in the crate's tensor format.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanoConfig, LanoModel};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LANOCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Run information stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub dtype: DType,
    pub seed: Option<u64>,
    pub epoch: Option<usize>,
    pub test_rel_l2: Option<f64>,
    pub normalization: Option<Normalizer>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real = f32> {
    pub model: LanoModel<T>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    model: LanoConfig,
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn save_checkpoint<T: Real>(
    model: &LanoModel<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let header = Header {
        meta: CheckpointMeta {
            dtype: T::DTYPE,
            ..meta.clone()
        },
        model: model.config().clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    put_u64(&mut buf, text.len() as u64)?;
    buf.extend_from_slice(text.as_bytes());
    let params = model.params();
    put_u64(&mut buf, params.len() as u64)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u64(&mut buf, name.len() as u64)?;
        buf.extend_from_slice(name.as_bytes());
        t.write_to(&mut buf)?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a half-written best model
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, converting weights to `T` if they were stored at the
/// other precision.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { .. } | Error::Io(_) => e,
        other => Error::format(path, other.to_string()),
    })
}

fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = bytes;
    let truncated = |what: &str| Error::invalid("checkpoint decode", format!("truncated {what}"));
    let mut head = [0u8; 9];
    r.read_exact(&mut head).map_err(|_| truncated("header"))?;
    if &head[..8] != CHECKPOINT_MAGIC {
        return Err(Error::invalid("checkpoint decode", "bad magic"));
    }
    if head[8] != CHECKPOINT_VERSION {
        return Err(Error::invalid(
            "checkpoint decode",
            format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                head[8]
            ),
        ));
    }
    let read_u64 = |r: &mut &[u8], what: &str| -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| truncated(what))?;
        Ok(u64::from_le_bytes(b))
    };
    let len = read_u64(&mut r, "config length")? as usize;
    if len > r.len() {
        return Err(truncated("config block"));
    }
    let text = std::str::from_utf8(&r[..len])
        .map_err(|e| Error::invalid("checkpoint decode", e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    r = &r[len..];

    let mut model = LanoModel::<T>::new(header.model, 0)?;
    let count = read_u64(&mut r, "tensor count")?;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r, "name length")? as usize;
        if name_len > r.len() {
            return Err(truncated("parameter name"));
        }
        let name = String::from_utf8(r[..name_len].to_vec())
            .map_err(|e| Error::invalid("checkpoint decode", e.to_string()))?;
        r = &r[name_len..];
        let t = Tensor::<T>::read_from(&mut r)?;
        if model.params().find(&name).is_none() {
            return Err(Error::Config(format!(
                "checkpoint holds unknown parameter {name}"
            )));
        }
        model.params_mut().set(&name, t)?;
        seen.insert(name);
    }
    if let Some(missing) = model.params().names().iter().find(|n| !seen.contains(*n)) {
        return Err(Error::Config(format!(
            "checkpoint is missing parameter {missing}"
        )));
    }
    if !r.is_empty() {
        return Err(Error::invalid(
            "checkpoint decode",
            format!("{} trailing bytes", r.len()),
        ));
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChannelStats;

    fn model() -> LanoModel<f32> {
        LanoModel::new(LanoConfig::sized(2, 2, 8, 4), 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let meta = CheckpointMeta {
            seed: Some(4),
            epoch: Some(17),
            test_rel_l2: Some(0.0123),
            normalization: Some(Normalizer {
                x: ChannelStats {
                    mean: vec![0.5, 0.5],
                    std: vec![0.3, 0.3],
                },
                a: None,
                u: ChannelStats {
                    mean: vec![0.01],
                    std: vec![0.02],
                },
            }),
            ..Default::default()
        };
        save_checkpoint(&m, &meta, &path).unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.model.params(), m.params());
        assert_eq!(ck.model.config(), m.config());
        assert_eq!(ck.meta, meta);
        let bytes = fs::read(&path).unwrap();
        save_checkpoint(&ck.model, &ck.meta, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &CheckpointMeta::default(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_checkpoint::<f32>(&path).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
        }
        let mut wrong = bytes.clone();
        wrong[8] = 99;
        fs::write(&path, &wrong).unwrap();
        assert!(load_checkpoint::<f32>(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint::<f32>(&path)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn missing_parameter_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let mut store = crate::nn::ParamStore::<f32>::new();
        for (name, t) in m.params().names().iter().zip(m.params().tensors()).skip(1) {
            store.register(name.clone(), t.clone());
        }
        let partial = LanoModel {
            params: store,
            ..m.clone()
        };
        save_checkpoint(&partial, &CheckpointMeta::default(), &path).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains(&m.params().names()[0]), "{err}");
    }

    #[test]
    fn reload_runs_at_new_resolution_and_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &CheckpointMeta::default(), &path).unwrap();
        let ck = load_checkpoint::<f64>(&path).unwrap();
        for n in [4usize, 6] {
            let x = crate::data::grid_coordinates::<f64>(n, n);
            let a = Tensor::full([n * n, 1], 3.0);
            let y = ck.model.predict(&x, Some(&a), Some((n, n))).unwrap();
            assert_eq!(y.shape(), &[n * n, 1]);
        }
    }
}
