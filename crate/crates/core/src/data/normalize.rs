//! Per-channel standardization fitted on the training split.

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::tensor::{Real, Tensor};

/// Below this a channel is treated as constant and only centred.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics of the last axis over every row of every tensor.
    pub fn fit<'a, T: Real>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> Option<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for t in tensors {
            let c = t.last_dim();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            }
            for row in t.data().chunks_exact(c) {
                for (j, v) in row.iter().enumerate() {
                    let v = v.as_f64();
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var.sqrt() < MIN_STD {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Some(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        self.apply(t, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        self.apply(t, |v, m, s| v * s + m)
    }

    fn apply<T: Real>(&self, t: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<T> {
        let c = self.channels();
        let mut out = t.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = T::lit(f(v.as_f64(), self.mean[j], self.std[j]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x: ChannelStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<ChannelStats>,
    pub u: ChannelStats,
}

impl Normalizer {
    /// Fits every channel group on `samples`; `None` when there are none.
    pub fn fit<T: Real>(samples: &[Sample<T>]) -> Option<Self> {
        Some(Normalizer {
            x: ChannelStats::fit(samples.iter().map(|s| &s.x))?,
            a: ChannelStats::fit(samples.iter().filter_map(|s| s.a.as_ref())),
            u: ChannelStats::fit(samples.iter().map(|s| &s.u))?,
        })
    }
}
