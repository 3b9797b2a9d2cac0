//! Biased axial attention: naive reference and tiled memory-efficient kernels.

pub mod problem;
pub mod reference;
pub mod tiled;

pub use problem::{
    layout_from_msa, AttentionGrads, AttentionProblem, AttentionVariant, AxisMapping, Input, ProblemDims,
};
pub use reference::{
    attn_backward_ref, attn_backward_ref_logged, attn_forward_ref, attn_forward_ref_logged, record_naive_backward,
    record_naive_forward, ReferenceForward,
};
pub use tiled::{
    attn_backward_tiled, attn_forward_tiled, broadcast_bias_tile, AccumMode, AccumPolicy, BiasGradAccumulator,
    RowStats, TileConfig,
};
