use serde::Serialize;

use crate::attention::TileConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionDims {
    pub heads: u64,
    pub batch: u64,
    pub len: u64,
    pub head_dim: u64,
    pub bytes_per_elem: u64,
}

impl AttentionDims {
    pub fn new(heads: u64, batch: u64, len: u64, head_dim: u64, bytes_per_elem: u64) -> Result<Self> {
        let d = Self {
            heads,
            batch,
            len,
            head_dim,
            bytes_per_elem,
        };
        if [heads, batch, len, head_dim, bytes_per_elem].contains(&0) {
            return Err(Error::validation(format!("attention dims must be positive: {d:?}")));
        }
        Ok(d)
    }

    /// Row statistics and the softmax-backward row term are held in F32 or wider.
    pub fn stats_bytes(&self) -> u64 {
        self.bytes_per_elem.max(4)
    }

    fn logits_elems(&self) -> u64 {
        self.heads * self.batch * self.len * self.len
    }

    fn rows(&self) -> u64 {
        self.heads * self.batch * self.len
    }

    /// Q, K, V and O (or dO): needed by both execution modes.
    pub fn baseline_io_bytes(&self) -> u64 {
        4 * self.batch * self.len * self.heads * self.head_dim * self.bytes_per_elem
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Naive,
    Tiled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
}

/// Attention-internal bytes by category, excluding baseline I/O tensors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AttentionBytes {
    pub logits: u64,
    pub saved_probs: u64,
    pub grad_logits: u64,
    pub transient: u64,
    pub row_stats: u64,
    pub row_delta: u64,
}

impl AttentionBytes {
    pub fn total(&self) -> u64 {
        self.logits + self.saved_probs + self.grad_logits + self.transient + self.row_stats + self.row_delta
    }
}

/// Per-work-unit transient elements for one tile: logits tile, output
/// accumulator and the two per-row running values.
pub fn tile_transient_elems(tc: &TileConfig, head_dim: u64) -> u64 {
    let (tq, tk) = (tc.tile_q as u64, tc.tile_k as u64);
    tq * tk + tq * head_dim + 2 * tq
}

pub fn analytic_attention_bytes(
    dims: &AttentionDims,
    mode: AttentionMode,
    phase: Phase,
    tc: Option<&TileConfig>,
    workers: u64,
) -> Result<AttentionBytes> {
    AttentionDims::new(dims.heads, dims.batch, dims.len, dims.head_dim, dims.bytes_per_elem)?;
    let b = dims.bytes_per_elem;
    match mode {
        AttentionMode::Naive => {
            let square = dims.logits_elems() * b;
            Ok(AttentionBytes {
                logits: square,
                saved_probs: square,
                grad_logits: if phase == Phase::Backward { square } else { 0 },
                ..Default::default()
            })
        }
        AttentionMode::Tiled => {
            let tc = tc.ok_or_else(|| Error::validation("tiled mode requires a tile configuration"))?;
            if workers == 0 {
                return Err(Error::validation("workers must be positive"));
            }
            let transient = workers * tile_transient_elems(tc, dims.head_dim) * b;
            Ok(match phase {
                Phase::Forward => AttentionBytes {
                    transient,
                    row_stats: dims.rows() * dims.stats_bytes(),
                    ..Default::default()
                },
                Phase::Backward => AttentionBytes {
                    transient,
                    row_delta: dims.rows() * dims.stats_bytes(),
                    ..Default::default()
                },
            })
        }
    }
}
