//! Planner inputs and their configuration-file schema.
//!
//! Configuration files are TOML. Every table rejects unknown keys. Model and
//! hardware tables may start from a named profile and override any field:
//!
//! ```toml
//! score_bytes = 2
//!
//! [model]
//! profile = "genslm-25b"
//! act_multiplier = 1.5
//!
//! [parallel]
//! tp = 8
//! pp = 4
//! dp = 2
//! sp_enabled = true
//! posemb_partitioned = true
//! flash_attention = true
//! zero_stage = 3
//!
//! [hardware]
//! profile = "a100-40g"
//! num_gpus = 64
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Learned `[s, d]` table; trained, so it costs device memory.
    #[default]
    Learned,
    /// Rotary embedding; no table.
    Rotary,
    /// Linear attention biases; no table.
    Alibi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub params: u64,
    pub n_layer: u64,
    pub hidden: u64,
    pub n_head: u64,
    /// Constant in `act_multiplier * s * n_layer * hidden * batch * score_bytes`.
    #[serde(default = "one")]
    pub act_multiplier: f64,
    #[serde(default)]
    pub position_embedding: PositionEncoding,
    /// A materialised `[s, s]` mask is needed even with flash attention.
    #[serde(default)]
    pub custom_mask: bool,
    #[serde(default = "four")]
    pub mask_bytes: u64,
    #[serde(default = "four")]
    pub posemb_bytes: u64,
    #[serde(default = "three")]
    pub posemb_copies: u64,
}

fn one() -> f64 {
    1.0
}
fn three() -> u64 {
    3
}
fn four() -> u64 {
    4
}

impl ModelConfig {
    /// Shape placeholders for a 25B GPT-style model: 12 * 48 * 6656^2 ≈ 25.5e9.
    pub fn genslm_25b() -> Self {
        Self::gpt("genslm-25b", 25_000_000_000, 48, 6656, 52)
    }

    /// Shape placeholders for a 33B GPT-style model: 12 * 56 * 7168^2 ≈ 34.5e9.
    pub fn genslm_33b() -> Self {
        Self::gpt("genslm-33b", 33_000_000_000, 56, 7168, 56)
    }

    fn gpt(name: &str, params: u64, n_layer: u64, hidden: u64, n_head: u64) -> Self {
        Self {
            name: name.to_string(),
            params,
            n_layer,
            hidden,
            n_head,
            act_multiplier: 1.0,
            position_embedding: PositionEncoding::Learned,
            custom_mask: false,
            mask_bytes: 4,
            posemb_bytes: 4,
            posemb_copies: 3,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "genslm-25b" => Ok(Self::genslm_25b()),
            "genslm-33b" => Ok(Self::genslm_33b()),
            other => Err(Error::validation(format!("unknown model profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("params", self.params),
            ("n_layer", self.n_layer),
            ("hidden", self.hidden),
            ("n_head", self.n_head),
            ("mask_bytes", self.mask_bytes),
            ("posemb_bytes", self.posemb_bytes),
            ("posemb_copies", self.posemb_copies),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("model.{key} must be positive")));
        }
        if !(self.act_multiplier > 0.0 && self.act_multiplier.is_finite()) {
            return Err(Error::validation("model.act_multiplier must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    #[serde(default = "one_u64")]
    pub tp: u64,
    #[serde(default = "one_u64")]
    pub pp: u64,
    #[serde(default = "one_u64")]
    pub dp: u64,
    #[serde(default)]
    pub sp_enabled: bool,
    #[serde(default)]
    pub posemb_partitioned: bool,
    #[serde(default)]
    pub flash_attention: bool,
    /// Build masks above the hardware threshold in host memory.
    #[serde(default)]
    pub mask_staging: bool,
    #[serde(default)]
    pub zero_stage: u8,
    #[serde(default)]
    pub offload: bool,
    #[serde(default = "one_u64")]
    pub batch: u64,
}

fn one_u64() -> u64 {
    1
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self {
            tp: 1,
            pp: 1,
            dp: 1,
            sp_enabled: false,
            posemb_partitioned: false,
            flash_attention: false,
            mask_staging: false,
            zero_stage: 0,
            offload: false,
            batch: 1,
        }
    }
}

impl ParallelConfig {
    pub fn total_devices(&self) -> u64 {
        self.tp * self.pp * self.dp
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("tp", self.tp), ("pp", self.pp), ("dp", self.dp), ("batch", self.batch)] {
            if v == 0 {
                return Err(Error::validation(format!("parallel.{key} must be at least 1")));
            }
        }
        if self.zero_stage > 3 {
            return Err(Error::validation(format!(
                "parallel.zero_stage must be 0..=3, got {}",
                self.zero_stage
            )));
        }
        if self.posemb_partitioned && !self.sp_enabled {
            return Err(Error::validation(
                "parallel.posemb_partitioned requires parallel.sp_enabled",
            ));
        }
        Ok(())
    }

    /// Every memory optimisation enabled on the given layout.
    pub fn all_on(layout: Layout) -> Self {
        Self {
            tp: layout.tp,
            pp: layout.pp,
            dp: layout.dp,
            sp_enabled: true,
            posemb_partitioned: true,
            flash_attention: true,
            mask_staging: true,
            zero_stage: 3,
            offload: true,
            batch: 1,
        }
    }

    /// Every memory optimisation disabled on the given layout.
    pub fn all_off(layout: Layout) -> Self {
        Self {
            tp: layout.tp,
            pp: layout.pp,
            dp: layout.dp,
            ..Self::default()
        }
    }
}

/// Device grid `tp x pp x dp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub tp: u64,
    pub pp: u64,
    pub dp: u64,
}

impl Layout {
    /// Fill tensor parallelism first, then pipeline, then data parallelism.
    pub fn for_devices(num_gpus: u64, tp_max: u64, pp_max: u64) -> Result<Self> {
        if num_gpus == 0 || tp_max == 0 || pp_max == 0 {
            return Err(Error::validation("device count and layout caps must be positive"));
        }
        let tp = largest_divisor_at_most(num_gpus, tp_max);
        let pp = largest_divisor_at_most(num_gpus / tp, pp_max);
        Ok(Self {
            tp,
            pp,
            dp: num_gpus / (tp * pp),
        })
    }
}

fn largest_divisor_at_most(n: u64, cap: u64) -> u64 {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub gpu_mem_bytes: u64,
    pub num_gpus: u64,
    #[serde(default = "default_threshold")]
    pub mask_threshold: u64,
    #[serde(default = "default_reserve")]
    pub reserve_frac: f64,
}

fn default_threshold() -> u64 {
    16_384
}
fn default_reserve() -> f64 {
    0.10
}

impl HardwareConfig {
    /// 40 GiB devices with the 16K mask-placement threshold.
    pub fn a100_40g(num_gpus: u64) -> Self {
        Self {
            gpu_mem_bytes: 40 << 30,
            num_gpus,
            mask_threshold: default_threshold(),
            reserve_frac: default_reserve(),
        }
    }

    pub fn profile(name: &str, num_gpus: u64) -> Result<Self> {
        match name {
            "a100-40g" => Ok(Self::a100_40g(num_gpus)),
            other => Err(Error::validation(format!("unknown hardware profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpu_mem_bytes == 0 {
            return Err(Error::validation("hardware.gpu_mem_bytes must be positive"));
        }
        if self.num_gpus == 0 {
            return Err(Error::validation("hardware.num_gpus must be positive"));
        }
        if !(0.0..1.0).contains(&self.reserve_frac) {
            return Err(Error::validation(format!(
                "hardware.reserve_frac must be in [0, 1), got {}",
                self.reserve_frac
            )));
        }
        Ok(())
    }

    /// Bytes available to the planner on one device.
    pub fn usable_bytes(&self) -> u64 {
        (self.gpu_mem_bytes as f64 * (1.0 - self.reserve_frac)).floor() as u64
    }
}

/// `[model]` table: an optional profile plus field overrides.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub profile: Option<String>,
    pub name: Option<String>,
    pub params: Option<u64>,
    pub n_layer: Option<u64>,
    pub hidden: Option<u64>,
    pub n_head: Option<u64>,
    pub act_multiplier: Option<f64>,
    pub position_embedding: Option<PositionEncoding>,
    pub custom_mask: Option<bool>,
    pub mask_bytes: Option<u64>,
    pub posemb_bytes: Option<u64>,
    pub posemb_copies: Option<u64>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut m = match &self.profile {
            Some(p) => ModelConfig::profile(p)?,
            None => {
                let need = |key: &str, v: Option<u64>| {
                    v.ok_or_else(|| Error::validation(format!("model.{key} is required without model.profile")))
                };
                ModelConfig::gpt(
                    self.name.as_deref().unwrap_or("custom"),
                    need("params", self.params)?,
                    need("n_layer", self.n_layer)?,
                    need("hidden", self.hidden)?,
                    need("n_head", self.n_head)?,
                )
            }
        };
        if let Some(v) = &self.name {
            m.name = v.clone();
        }
        macro_rules! overlay {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { m.$f = v; } )* };
        }
        overlay!(
            params,
            n_layer,
            hidden,
            n_head,
            act_multiplier,
            position_embedding,
            custom_mask,
            mask_bytes,
            posemb_bytes,
            posemb_copies
        );
        m.validate()?;
        Ok(m)
    }
}

/// `[hardware]` table: an optional profile plus field overrides.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSection {
    pub profile: Option<String>,
    pub gpu_mem_bytes: Option<u64>,
    pub num_gpus: Option<u64>,
    pub mask_threshold: Option<u64>,
    pub reserve_frac: Option<f64>,
}

impl HardwareSection {
    /// `num_gpus` falls back to `default_gpus` when the table leaves it out.
    pub fn resolve(&self, default_gpus: u64) -> Result<HardwareConfig> {
        let num_gpus = self.num_gpus.unwrap_or(default_gpus);
        let mut hw = match &self.profile {
            Some(p) => HardwareConfig::profile(p, num_gpus)?,
            None => HardwareConfig {
                gpu_mem_bytes: self
                    .gpu_mem_bytes
                    .ok_or_else(|| Error::validation("hardware.gpu_mem_bytes is required without hardware.profile"))?,
                num_gpus,
                mask_threshold: default_threshold(),
                reserve_frac: default_reserve(),
            },
        };
        if let Some(v) = self.gpu_mem_bytes {
            hw.gpu_mem_bytes = v;
        }
        if let Some(v) = self.mask_threshold {
            hw.mask_threshold = v;
        }
        if let Some(v) = self.reserve_frac {
            hw.reserve_frac = v;
        }
        hw.validate()?;
        Ok(hw)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    #[serde(default = "two")]
    score_bytes: u64,
    model: ModelSection,
    #[serde(default)]
    parallel: ParallelConfig,
    hardware: HardwareSection,
}

fn two() -> u64 {
    2
}

/// A complete planner input.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub model: ModelConfig,
    pub parallel: ParallelConfig,
    pub hardware: HardwareConfig,
    pub score_bytes: u64,
}

impl PlanConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: PlanFile =
            toml::from_str(text).map_err(|e| Error::validation(format!("plan config: {}", e.message())))?;
        let parallel = file.parallel;
        parallel.validate()?;
        let hardware = file.hardware.resolve(parallel.total_devices())?;
        let cfg = Self {
            model: file.model.resolve()?,
            parallel,
            hardware,
            score_bytes: file.score_bytes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.parallel.validate()?;
        self.hardware.validate()?;
        if self.score_bytes == 0 {
            return Err(Error::validation("score_bytes must be positive"));
        }
        if self.parallel.total_devices() != self.hardware.num_gpus {
            return Err(Error::validation(format!(
                "tp*pp*dp = {} does not match hardware.num_gpus = {}",
                self.parallel.total_devices(),
                self.hardware.num_gpus
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PositionEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Rotary => "rotary",
            Self::Alibi => "alibi",
        })
    }
}
