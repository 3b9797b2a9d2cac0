use serde::Serialize;

use super::config::{HardwareConfig, ModelConfig, ParallelConfig};
use super::terms::{memory_breakdown, MemoryBreakdown, MemoryTerm};
use crate::error::{Error, Result};

/// Upper end of the sequence-length search.
pub const SEARCH_CAP: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanResult {
    pub max_seq: u64,
    /// `None` when not even `s = 1` fits.
    pub breakdown_at_max: Option<MemoryBreakdown>,
    /// Largest device term at `max_seq + 1`, or at the cap when it is reached.
    pub limiting_term: MemoryTerm,
    /// The whole search range fits.
    pub capped: bool,
}

/// Largest `s` in `[1, cap]` with `fits(s)`, or 0 when `fits(1)` is false.
///
/// `fits` must be true on a prefix of the range. Probes at power-of-two
/// distances on both sides of the answer check that; a violation is an
/// [`Error::Invariant`].
pub fn search_max_fitting(cap: u64, mut fits: impl FnMut(u64) -> Result<bool>) -> Result<u64> {
    if cap == 0 {
        return Err(Error::validation("search cap must be positive"));
    }
    if !fits(1)? {
        return Ok(0);
    }
    let mut lo = 1u64;
    if fits(cap)? {
        lo = cap;
    } else {
        let mut hi = cap;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fits(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let mut step = 1u64;
    while step < cap {
        if lo > step && !fits(lo - step)? {
            return Err(Error::Invariant(format!(
                "memory model is not monotone in s: {} fits but {} does not",
                lo,
                lo - step
            )));
        }
        if lo + step <= cap && fits(lo + step)? {
            return Err(Error::Invariant(format!(
                "memory model is not monotone in s: {} does not fit but {} does",
                lo + 1,
                lo + step
            )));
        }
        step *= 2;
    }
    Ok(lo)
}

pub fn max_seq(mc: &ModelConfig, pc: &ParallelConfig, hw: &HardwareConfig, score_bytes: u64) -> Result<PlanResult> {
    let at = |s: u64| memory_breakdown(mc, pc, hw, s, score_bytes);
    let best = search_max_fitting(SEARCH_CAP, |s| Ok(at(s)?.fits))?;
    let capped = best == SEARCH_CAP;
    let limit_at = if capped { best } else { best + 1 };
    Ok(PlanResult {
        max_seq: best,
        breakdown_at_max: if best == 0 { None } else { Some(at(best)?) },
        limiting_term: at(limit_at)?.largest_term(),
        capped,
    })
}
