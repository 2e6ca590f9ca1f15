//! Closed-form multiply-add counts for the attention variants.
//!
//! `d` is the full model width; splitting it over `h` heads leaves the
//! dominant products unchanged, since each head works on `d / h` channels.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Softmax,
    Linear,
    Agent,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Softmax => "softmax",
            AttentionVariant::Linear => "linear",
            AttentionVariant::Agent => "agent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(AttentionVariant::Softmax),
            "linear" => Some(AttentionVariant::Linear),
            "agent" => Some(AttentionVariant::Agent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    /// Multiply-adds of the matrix products.
    pub dominant: u64,
    /// Element-wise work: softmax/feature-map entries, bias additions and
    /// agent pooling.
    pub lower_order: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.dominant + self.lower_order
    }
}

/// Dominant terms: softmax `2·N²·d`, linear `2·N·d²`, agent `4·N·M·d`.
///
/// Lower-order terms: softmax `H·N²` score entries; linear `2·N·d` feature-map
/// evaluations; agent `2·H·N·M` score entries, `2·H·N·M` bias additions and
/// `N·d` pooling additions.
pub fn flop_count(variant: AttentionVariant, n: usize, m: usize, d: usize, h: usize) -> FlopCount {
    let (n, m, d, h) = (n as u64, m as u64, d as u64, h as u64);
    match variant {
        AttentionVariant::Softmax => FlopCount {
            dominant: 2 * n * n * d,
            lower_order: h * n * n,
        },
        AttentionVariant::Linear => FlopCount {
            dominant: 2 * n * d * d,
            lower_order: 2 * n * d,
        },
        AttentionVariant::Agent => FlopCount {
            dominant: 4 * n * m * d,
            lower_order: 4 * h * n * m + n * d,
        },
    }
}
