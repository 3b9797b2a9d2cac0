//! Allocation ledger and analytic attention memory model.

pub mod analytic;
pub mod ledger;

pub use analytic::{
    analytic_attention_bytes, tile_transient_elems, AttentionBytes, AttentionDims, AttentionMode, Phase,
};
pub use ledger::{measure_peak, AllocationLedger, EventKind, LedgerEvent, PeakReport};
