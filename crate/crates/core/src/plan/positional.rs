//! Rotary position embedding and linear attention biases.

use crate::error::{Error, Result};
use crate::format::NumericFormat;
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotate feature pairs `(2t, 2t+1)` of row `m` by `positions[m] * base^(-2t/D)`.
///
/// Computed in f64 and rounded once into `x`'s format.
pub fn rope_apply(x: &Tensor, positions: &[i64], base: f64) -> Result<Tensor> {
    let &[l, d] = x.shape() else {
        return Err(Error::validation(format!(
            "rope expects a rank-2 (L, D) tensor, got {:?}",
            x.shape()
        )));
    };
    if d % 2 != 0 {
        return Err(Error::validation(format!(
            "rope feature dimension must be even, got {d}"
        )));
    }
    if positions.len() != l {
        return Err(Error::validation(format!(
            "rope expects {l} positions, got {}",
            positions.len()
        )));
    }
    if !(base > 0.0 && base.is_finite()) {
        return Err(Error::validation(format!(
            "rope base must be positive and finite, got {base}"
        )));
    }
    x.check_finite("rope input")?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for (m, &pos) in positions.iter().enumerate() {
        for t in 0..d / 2 {
            let theta = base.powf(-2.0 * t as f64 / d as f64);
            let (sin, cos) = (pos as f64 * theta).sin_cos();
            let (a, b) = (src[m * d + 2 * t], src[m * d + 2 * t + 1]);
            out[m * d + 2 * t] = a * cos - b * sin;
            out[m * d + 2 * t + 1] = a * sin + b * cos;
        }
    }
    Tensor::new(&[l, d], out, x.format())
}

/// Head slope `2^(-8 (h + 1) / H)`.
pub fn alibi_slope(h: usize, heads: usize) -> f64 {
    (-8.0 * (h + 1) as f64 / heads as f64).exp2()
}

/// `(H, s, s)` F64 bias with `-slope_h * (i - j)` on and below the diagonal.
///
/// Entries above the diagonal are 0; causal masking is applied separately.
pub fn alibi_bias(heads: usize, s: usize) -> Result<Tensor> {
    if heads == 0 || !heads.is_power_of_two() {
        return Err(Error::validation(format!(
            "alibi head count must be a power of two, got {heads}"
        )));
    }
    if s == 0 {
        return Err(Error::validation("alibi sequence length must be at least 1"));
    }
    let mut data = vec![0.0; heads * s * s];
    for h in 0..heads {
        let slope = alibi_slope(h, heads);
        for i in 0..s {
            for j in 0..=i {
                data[(h * s + i) * s + j] = -slope * (i - j) as f64;
            }
        }
    }
    Tensor::new(&[heads, s, s], data, NumericFormat::F64)
}
