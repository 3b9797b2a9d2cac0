//! Run configuration file: one optional table per command, unknown keys rejected.
//!
//! ```toml
//! [attn_bench]
//! variants = ["msa_row_wise", "triangular_start_node"]
//! format = "f32"
//! cases = [{ batch = 4, len = 128, heads = 2, head_dim = 8 }]
//! tile_q = 64
//! tile_k = 64
//!
//! [plan]
//! num_gpus = [8, 64]
//! frameworks = ["baseline", "optimized"]
//! [plan.model]
//! profile = "genslm-33b"
//! ```

use std::path::Path;

use memlab::attention::AttentionVariant;
use memlab::plan::{HardwareSection, ModelSection};
use memlab::NumericFormat;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub attn_bench: BenchSection,
    pub sweep: SweepSection,
    pub gradcheck: GradcheckSection,
    pub precision_demo: PrecisionSection,
    pub plan: PlanSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {}", path.display(), e.message()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Case {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

/// Largest tolerated max-abs difference between tiled and naive outputs.
pub fn default_tolerance(format: NumericFormat) -> f64 {
    match format {
        NumericFormat::F64 => 1e-10,
        NumericFormat::F32 => 1e-5,
        NumericFormat::F16e => 1e-2,
        NumericFormat::Bf16e => 5e-2,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub variants: Vec<AttentionVariant>,
    pub format: NumericFormat,
    pub cases: Vec<Case>,
    pub tile_q: usize,
    pub tile_k: usize,
    pub tile_b: usize,
    pub tolerance: Option<f64>,
    /// Refuse cases whose naive `(H, B, L, L)` buffers would exceed this.
    pub max_naive_bytes: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            variants: AttentionVariant::ALL.to_vec(),
            format: NumericFormat::F32,
            cases: vec![Case {
                batch: 4,
                len: 128,
                heads: 2,
                head_dim: 8,
            }],
            tile_q: 64,
            tile_k: 64,
            tile_b: 1,
            tolerance: None,
            max_naive_bytes: 1 << 30,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub variant: AttentionVariant,
    pub format: NumericFormat,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub lens: Vec<usize>,
    /// `[tile_q, tile_k, tile_b]` triples.
    pub tiles: Vec<[usize; 3]>,
    pub tolerance: Option<f64>,
    pub max_naive_bytes: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::MsaRowWise,
            format: NumericFormat::F32,
            batch: 2,
            heads: 2,
            head_dim: 8,
            lens: vec![64, 128, 256, 512],
            tiles: vec![[32, 32, 1], [64, 64, 1]],
            tolerance: None,
            max_naive_bytes: 1 << 30,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub variants: Vec<AttentionVariant>,
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub tile_q: usize,
    pub tile_k: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            variants: AttentionVariant::ALL.to_vec(),
            batch: 2,
            len: 16,
            heads: 2,
            head_dim: 4,
            step: 1e-5,
            tolerance: 1e-6,
            tile_q: 5,
            tile_k: 6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionSection {
    pub batches: Vec<usize>,
    pub heads: usize,
    pub len: usize,
    pub format: NumericFormat,
    /// Largest tolerated error of the upcast policy.
    pub upcast_tolerance: f64,
}

impl Default for PrecisionSection {
    fn default() -> Self {
        Self {
            batches: vec![1, 64, 512, 4096],
            heads: 1,
            len: 8,
            format: NumericFormat::Bf16e,
            upcast_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub model: ModelSection,
    pub hardware: HardwareSection,
    pub num_gpus: Vec<u64>,
    /// `baseline` (every optimisation off) or `optimized` (every optimisation on).
    pub frameworks: Vec<String>,
    pub tp_max: u64,
    pub pp_max: u64,
    pub batch: u64,
    pub score_bytes: u64,
    /// Sequence lengths reported by `plan-breakdown`.
    pub seq_lens: Vec<u64>,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            model: ModelSection {
                profile: Some("genslm-25b".into()),
                ..ModelSection::default()
            },
            hardware: HardwareSection {
                profile: Some("a100-40g".into()),
                ..HardwareSection::default()
            },
            num_gpus: vec![8, 16, 32, 64],
            frameworks: vec!["baseline".into(), "optimized".into()],
            tp_max: 8,
            pp_max: 4,
            batch: 1,
            score_bytes: 2,
            seq_lens: vec![16_384, 65_536, 262_144],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.attn_bench.cases.len(), 1);
        assert_eq!(c.plan.model.profile.as_deref(), Some("genslm-25b"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = toml::from_str::<RunConfig>("[attn_bench]\ntile_z = 3\n").unwrap_err();
        assert!(err.message().contains("tile_z"), "{}", err.message());
        let err = toml::from_str::<RunConfig>("[bogus]\n").unwrap_err();
        assert!(err.message().contains("bogus"));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: RunConfig = toml::from_str("[plan]\nnum_gpus = [64]\n[plan.model]\nprofile = \"genslm-33b\"\n").unwrap();
        assert_eq!(c.plan.num_gpus, vec![64]);
        assert_eq!(c.plan.tp_max, 8);
        assert_eq!(c.plan.model.resolve().unwrap().name, "genslm-33b");
    }
}
