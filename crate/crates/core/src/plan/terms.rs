//! Per-device memory terms and their sum.

use std::fmt;

use serde::Serialize;

use super::config::{HardwareConfig, ModelConfig, ParallelConfig, PositionEncoding};
use crate::error::{Error, Result};

/// Mixed-precision bytes per parameter: fp16 weights, fp16 gradients and
/// fp32 master weights plus two Adam moments.
pub const PARAM_BYTES: u64 = 2;
pub const GRAD_BYTES: u64 = 2;
pub const OPTIM_BYTES: u64 = 12;

/// Memory multiplier while a mask is generated directly on the device.
pub const MASK_GENERATION_FACTOR: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPlacement {
    GpuDirect,
    CpuStaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaskPlan {
    pub placement: MaskPlacement,
    pub device_bytes: u64,
    pub host_bytes: u64,
}

fn check_seq(s: u64) -> Result<()> {
    if s == 0 {
        return Err(Error::validation("sequence length must be at least 1"));
    }
    Ok(())
}

/// Where an `[s, s]` mask is built and what it costs on device and host.
pub fn mask_plan(s: u64, hw: &HardwareConfig, bytes_per_elem: u64) -> Result<MaskPlan> {
    mask_plan_with_threshold(s, Some(hw.mask_threshold), bytes_per_elem)
}

/// `threshold = None` always generates on the device.
fn mask_plan_with_threshold(s: u64, threshold: Option<u64>, bytes_per_elem: u64) -> Result<MaskPlan> {
    check_seq(s)?;
    if bytes_per_elem == 0 {
        return Err(Error::validation("mask bytes per element must be positive"));
    }
    let final_bytes = s.saturating_mul(s).saturating_mul(bytes_per_elem);
    Ok(match threshold {
        Some(t) if s > t => MaskPlan {
            placement: MaskPlacement::CpuStaged,
            device_bytes: final_bytes,
            host_bytes: final_bytes,
        },
        _ => MaskPlan {
            placement: MaskPlacement::GpuDirect,
            device_bytes: final_bytes.saturating_mul(MASK_GENERATION_FACTOR),
            host_bytes: 0,
        },
    })
}

/// Learned position-embedding bytes held by one device.
///
/// Partitioning gives each device `ceil(s / tp)` rows of the table.
pub fn posemb_plan(s: u64, d: u64, bytes: u64, copies: u64, pc: &ParallelConfig) -> Result<u64> {
    check_seq(s)?;
    if d == 0 || bytes == 0 || copies == 0 {
        return Err(Error::validation(
            "posemb hidden size, bytes and copies must be positive",
        ));
    }
    if pc.posemb_partitioned && !pc.sp_enabled {
        return Err(Error::validation(
            "parallel.posemb_partitioned requires parallel.sp_enabled",
        ));
    }
    let rows = if pc.posemb_partitioned { s.div_ceil(pc.tp) } else { s };
    Ok(copies.saturating_mul(rows).saturating_mul(d).saturating_mul(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryTerm {
    ModelState,
    Activation,
    Mask,
    Posemb,
    AttnMap,
}

impl MemoryTerm {
    pub fn label(&self) -> &'static str {
        match self {
            Self::ModelState => "model_state",
            Self::Activation => "activation",
            Self::Mask => "mask",
            Self::Posemb => "posemb",
            Self::AttnMap => "attn_map",
        }
    }
}

impl fmt::Display for MemoryTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryBreakdown {
    pub seq_len: u64,
    pub model_state_bytes: u64,
    /// Offloaded optimizer state; not device resident.
    pub model_state_host_bytes: u64,
    pub activation_bytes: u64,
    pub mask_device_bytes: u64,
    pub mask_host_bytes: u64,
    /// `None` when no materialised mask is needed.
    pub mask_placement: Option<MaskPlacement>,
    pub posemb_bytes: u64,
    pub attn_map_bytes: u64,
    pub usable_bytes: u64,
    pub fits: bool,
}

impl MemoryBreakdown {
    pub fn device_terms(&self) -> [(MemoryTerm, u64); 5] {
        [
            (MemoryTerm::ModelState, self.model_state_bytes),
            (MemoryTerm::Activation, self.activation_bytes),
            (MemoryTerm::Mask, self.mask_device_bytes),
            (MemoryTerm::Posemb, self.posemb_bytes),
            (MemoryTerm::AttnMap, self.attn_map_bytes),
        ]
    }

    pub fn device_total(&self) -> u64 {
        self.device_terms()
            .iter()
            .fold(0u64, |acc, (_, b)| acc.saturating_add(*b))
    }

    /// Largest device term; ties go to the earlier term.
    pub fn largest_term(&self) -> MemoryTerm {
        let terms = self.device_terms();
        let mut best = terms[0];
        for t in &terms[1..] {
            if t.1 > best.1 {
                best = *t;
            }
        }
        best.0
    }
}

/// Activation bytes per device before rounding up.
///
/// Sequence parallelism splits everything over the tensor-parallel group.
/// Without it only the tensor-parallel regions are split, modelled as half the
/// activations, so the factor is `1/(2 tp) + 1/2`.
fn activation_per_device(mc: &ModelConfig, pc: &ParallelConfig, s: u64, score_bytes: u64) -> f64 {
    let base =
        mc.act_multiplier * s as f64 * mc.n_layer as f64 * mc.hidden as f64 * pc.batch as f64 * score_bytes as f64;
    let tp = pc.tp as f64;
    let pp = pc.pp as f64;
    if pc.sp_enabled {
        base / (tp * pp)
    } else {
        base / pp * (0.5 / tp + 0.5)
    }
}

/// Returns `(device, host)` model-state bytes.
fn model_state(mc: &ModelConfig, pc: &ParallelConfig) -> (u64, u64) {
    let split = pc.tp * pc.pp;
    let shard = |per_param: u64, stage: u8| {
        let b = mc.params.saturating_mul(per_param).div_ceil(split);
        if pc.zero_stage >= stage {
            b.div_ceil(pc.dp)
        } else {
            b
        }
    };
    let optim = shard(OPTIM_BYTES, 1);
    let grads = shard(GRAD_BYTES, 2);
    let params = shard(PARAM_BYTES, 3);
    if pc.offload {
        (params + grads, optim)
    } else {
        (params + grads + optim, 0)
    }
}

pub fn memory_breakdown(
    mc: &ModelConfig,
    pc: &ParallelConfig,
    hw: &HardwareConfig,
    s: u64,
    score_bytes: u64,
) -> Result<MemoryBreakdown> {
    mc.validate()?;
    pc.validate()?;
    hw.validate()?;
    check_seq(s)?;
    if score_bytes == 0 {
        return Err(Error::validation("score_bytes must be positive"));
    }

    let (model_state_bytes, model_state_host_bytes) = model_state(mc, pc);
    let activation_bytes = activation_per_device(mc, pc, s, score_bytes).ceil() as u64;

    let attn_map_bytes = if pc.flash_attention {
        0
    } else {
        mc.n_head
            .div_ceil(pc.tp)
            .saturating_mul(s)
            .saturating_mul(s)
            .saturating_mul(score_bytes)
            .saturating_mul(pc.batch)
    };

    let mask = if !pc.flash_attention || mc.custom_mask {
        let threshold = pc.mask_staging.then_some(hw.mask_threshold);
        Some(mask_plan_with_threshold(s, threshold, mc.mask_bytes)?)
    } else {
        None
    };

    let posemb_bytes = match mc.position_embedding {
        PositionEncoding::Learned => posemb_plan(s, mc.hidden, mc.posemb_bytes, mc.posemb_copies, pc)?,
        PositionEncoding::Rotary | PositionEncoding::Alibi => 0,
    };

    let mut b = MemoryBreakdown {
        seq_len: s,
        model_state_bytes,
        model_state_host_bytes,
        activation_bytes,
        mask_device_bytes: mask.map_or(0, |m| m.device_bytes),
        mask_host_bytes: mask.map_or(0, |m| m.host_bytes),
        mask_placement: mask.map(|m| m.placement),
        posemb_bytes,
        attn_map_bytes,
        usable_bytes: hw.usable_bytes(),
        fits: false,
    };
    b.fits = b.device_total() <= b.usable_bytes;
    Ok(b)
}

/// `act_multiplier` that makes the model's activation term at `s` equal a
/// measured per-device activation size.
pub fn calibrate_act_multiplier(
    mc: &ModelConfig,
    pc: &ParallelConfig,
    s: u64,
    score_bytes: u64,
    measured_activation_bytes: u64,
) -> Result<f64> {
    check_seq(s)?;
    pc.validate()?;
    if measured_activation_bytes == 0 || score_bytes == 0 {
        return Err(Error::validation("measured bytes and score_bytes must be positive"));
    }
    let unit = ModelConfig {
        act_multiplier: 1.0,
        ..mc.clone()
    };
    unit.validate()?;
    Ok(measured_activation_bytes as f64 / activation_per_device(&unit, pc, s, score_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> ModelConfig {
        ModelConfig {
            name: "toy".into(),
            params: 1,
            n_layer: 1,
            hidden: 1,
            n_head: 1,
            act_multiplier: 1.0,
            position_embedding: PositionEncoding::Learned,
            custom_mask: false,
            mask_bytes: 4,
            posemb_bytes: 4,
            posemb_copies: 3,
        }
    }

    #[test]
    fn mask_at_fifty_thousand_is_ten_gigabytes() {
        let hw = HardwareConfig::a100_40g(8);
        let m = mask_plan(50_000, &hw, 4).unwrap();
        assert_eq!(m.placement, MaskPlacement::CpuStaged);
        assert_eq!(m.device_bytes, 10_000_000_000);
        assert_eq!(m.host_bytes, 10_000_000_000);
    }

    #[test]
    fn mask_placement_flips_after_threshold() {
        let hw = HardwareConfig::a100_40g(8);
        assert_eq!(mask_plan(8_192, &hw, 4).unwrap().placement, MaskPlacement::GpuDirect);
        assert_eq!(mask_plan(16_384, &hw, 4).unwrap().placement, MaskPlacement::GpuDirect);
        assert_eq!(mask_plan(16_385, &hw, 4).unwrap().placement, MaskPlacement::CpuStaged);
        assert_eq!(mask_plan(32_768, &hw, 4).unwrap().placement, MaskPlacement::CpuStaged);
    }

    #[test]
    fn mask_unit_case_and_direct_doubles_staged() {
        let hw = HardwareConfig::a100_40g(8);
        let m = mask_plan(1, &hw, 4).unwrap();
        assert_eq!(
            (m.placement, m.device_bytes, m.host_bytes),
            (MaskPlacement::GpuDirect, 8, 0)
        );
        for s in [1u64, 100, 16_384, 70_000] {
            let direct = mask_plan_with_threshold(s, None, 4).unwrap();
            let staged = mask_plan_with_threshold(s, Some(0), 4).unwrap();
            assert_eq!(direct.device_bytes, 2 * staged.device_bytes);
        }
        assert!(mask_plan(0, &hw, 4).is_err());
    }

    #[test]
    fn posemb_replicated_and_partitioned() {
        let off = ParallelConfig::default();
        assert_eq!(posemb_plan(100_000, 8192, 4, 3, &off).unwrap(), 9_830_400_000);
        for p in [2u64, 4, 8, 32] {
            let on = ParallelConfig {
                tp: p,
                sp_enabled: true,
                posemb_partitioned: true,
                ..ParallelConfig::default()
            };
            let part = posemb_plan(100_000, 8192, 4, 3, &on).unwrap();
            assert_eq!(part * p, 9_830_400_000);
        }
        let unit = ParallelConfig {
            tp: 8,
            sp_enabled: true,
            posemb_partitioned: true,
            ..ParallelConfig::default()
        };
        assert_eq!(posemb_plan(8, 1, 1, 1, &unit).unwrap(), 1);
        let bad = ParallelConfig {
            posemb_partitioned: true,
            ..ParallelConfig::default()
        };
        assert!(posemb_plan(10, 1, 1, 1, &bad).is_err());
    }

    #[test]
    fn activation_partitioned_over_forty_devices() {
        // 480 GB of activations split forty ways
        let mc = ModelConfig {
            n_layer: 1,
            hidden: 1,
            ..toy_model()
        };
        let s = 240_000_000_000;
        let pc = ParallelConfig {
            tp: 8,
            pp: 5,
            sp_enabled: true,
            ..ParallelConfig::default()
        };
        let b = memory_breakdown(&mc, &pc, &HardwareConfig::a100_40g(40), s, 2).unwrap();
        assert_eq!(b.activation_bytes, 12_000_000_000);
        let no_sp = ParallelConfig {
            sp_enabled: false,
            ..pc
        };
        let b2 = memory_breakdown(&mc, &no_sp, &HardwareConfig::a100_40g(40), s, 2).unwrap();
        assert_eq!(b2.activation_bytes, 480_000_000_000 / 5 * 9 / 16);
    }

    #[test]
    fn unit_case_closed_forms() {
        let mc = toy_model();
        let pc = ParallelConfig::default();
        let hw = HardwareConfig::a100_40g(1);
        let b = memory_breakdown(&mc, &pc, &hw, 1, 2).unwrap();
        assert_eq!(b.model_state_bytes, 16);
        assert_eq!(b.activation_bytes, 2);
        assert_eq!(b.attn_map_bytes, 2);
        assert_eq!(b.mask_device_bytes, 8);
        assert_eq!(b.posemb_bytes, 12);
        assert_eq!(b.device_total(), 40);
        assert!(b.fits);
        assert!(memory_breakdown(&mc, &pc, &hw, 0, 2).is_err());

        let all_on = ParallelConfig::all_on(super::super::config::Layout { tp: 1, pp: 1, dp: 1 });
        let b = memory_breakdown(&mc, &all_on, &hw, 1, 2).unwrap();
        assert_eq!(b.model_state_bytes, 4);
        assert_eq!(b.model_state_host_bytes, 12);
        assert_eq!(b.attn_map_bytes, 0);
        assert_eq!(b.mask_device_bytes, 0);
        assert_eq!(b.mask_placement, None);
        assert_eq!(b.posemb_bytes, 12);
    }

    #[test]
    fn zero_stages_shard_over_data_parallel_ranks() {
        let mc = ModelConfig {
            params: 1_000,
            ..toy_model()
        };
        let hw = HardwareConfig::a100_40g(4);
        let at = |stage, offload| {
            let pc = ParallelConfig {
                dp: 4,
                zero_stage: stage,
                offload,
                ..ParallelConfig::default()
            };
            let b = memory_breakdown(&mc, &pc, &hw, 1, 2).unwrap();
            (b.model_state_bytes, b.model_state_host_bytes)
        };
        assert_eq!(at(0, false), (16_000, 0));
        assert_eq!(at(1, false), (2_000 + 2_000 + 3_000, 0));
        assert_eq!(at(2, false), (2_000 + 500 + 3_000, 0));
        assert_eq!(at(3, false), (500 + 500 + 3_000, 0));
        assert_eq!(at(3, true), (1_000, 3_000));
    }

    #[test]
    fn staging_the_mask_turns_54_gb_into_39_gb() {
        let s: u64 = 61_237;
        let staged_mask = s * s * 4;
        let params = 1_250_000_000;
        let activation = 24_000_000_000 - params * 16;
        let mc = ModelConfig {
            params,
            custom_mask: true,
            position_embedding: PositionEncoding::Rotary,
            act_multiplier: activation as f64 / (2 * s) as f64,
            ..toy_model()
        };
        let hw = HardwareConfig {
            gpu_mem_bytes: 40_000_000_000,
            num_gpus: 1,
            mask_threshold: 16_384,
            reserve_frac: 0.0,
        };
        let direct = ParallelConfig {
            flash_attention: true,
            ..ParallelConfig::default()
        };
        let staged = ParallelConfig {
            mask_staging: true,
            ..direct
        };
        let a = memory_breakdown(&mc, &direct, &hw, s, 2).unwrap();
        let b = memory_breakdown(&mc, &staged, &hw, s, 2).unwrap();
        assert_eq!(a.device_total() - b.device_total(), staged_mask);
        assert_eq!((a.device_total() as f64 / 1e9).round(), 54.0);
        assert_eq!((b.device_total() as f64 / 1e9).round(), 39.0);
        assert!(!a.fits);
        assert!(b.fits);
        assert_eq!(b.mask_host_bytes, staged_mask);
    }

    #[test]
    fn largest_term_prefers_first_on_ties() {
        let b = MemoryBreakdown {
            seq_len: 1,
            model_state_bytes: 5,
            model_state_host_bytes: 0,
            activation_bytes: 7,
            mask_device_bytes: 7,
            mask_host_bytes: 0,
            mask_placement: None,
            posemb_bytes: 0,
            attn_map_bytes: 1,
            usable_bytes: 100,
            fits: true,
        };
        assert_eq!(b.largest_term(), MemoryTerm::Activation);
    }

    #[test]
    fn calibration_recovers_the_multiplier() {
        let mc = ModelConfig {
            n_layer: 4,
            hidden: 64,
            act_multiplier: 3.5,
            ..toy_model()
        };
        let pc = ParallelConfig {
            tp: 2,
            ..ParallelConfig::default()
        };
        let hw = HardwareConfig::a100_40g(2);
        let measured = memory_breakdown(&mc, &pc, &hw, 1000, 2).unwrap().activation_bytes;
        let k = calibrate_act_multiplier(&mc, &pc, 1000, 2, measured).unwrap();
        assert!((k - 3.5).abs() < 1e-9, "{k}");
    }
}
