//! Analytic per-device memory planner for long-sequence training.

pub mod config;
pub mod positional;
pub mod search;
pub mod terms;

pub use config::{
    HardwareConfig, HardwareSection, Layout, ModelConfig, ModelSection, ParallelConfig, PlanConfig, PositionEncoding,
};
pub use positional::{alibi_bias, alibi_slope, rope_apply, ROPE_BASE};
pub use search::{max_seq, search_max_fitting, PlanResult, SEARCH_CAP};
pub use terms::{
    calibrate_act_multiplier, mask_plan, memory_breakdown, posemb_plan, MaskPlacement, MaskPlan, MemoryBreakdown,
    MemoryTerm,
};
