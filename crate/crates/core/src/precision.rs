//! Bias-gradient accumulation error over a long broadcast axis.

use rand::Rng;

use crate::attention::{AccumMode, BiasGradAccumulator};
use crate::error::{Error, Result};
use crate::format::NumericFormat;
use crate::tensor::Tensor;

/// Accumulate `batch` identical `(heads, len, len)` logit-gradient slices
/// with magnitudes drawn from `[0.5, 1) * 1e-3`, and return
/// `max |acc - exact| / max |exact|` against the f64 product `batch * slice`.
pub fn bias_accumulation_error<R: Rng>(
    batch: usize,
    heads: usize,
    len: usize,
    format: NumericFormat,
    mode: AccumMode,
    rng: &mut R,
) -> Result<f64> {
    if batch == 0 || heads == 0 || len == 0 {
        return Err(Error::validation("batch, heads and len must be positive"));
    }
    let slice: Vec<f64> = (0..heads * len * len)
        .map(|_| format.round(rng.gen_range(0.5..1.0) * 1e-3))
        .collect();
    let mut acc = BiasGradAccumulator::new(heads, len, format, mode);
    for h in 0..heads {
        let tile = Tensor::new(&[len, len], slice[h * len * len..(h + 1) * len * len].to_vec(), format)?;
        for _ in 0..batch {
            acc.add_tile(h, 0, 0, &tile)?;
        }
    }
    let got = acc.finish();
    let exact: Vec<f64> = slice.iter().map(|x| x * batch as f64).collect();
    let scale = exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = got
        .data()
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(err / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn native_bf16_fails_and_upcast_holds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let native =
            bias_accumulation_error(4096, 1, 4, NumericFormat::Bf16e, AccumMode::NativeFormat, &mut rng).unwrap();
        let upcast = bias_accumulation_error(4096, 1, 4, NumericFormat::Bf16e, AccumMode::UpcastF32, &mut rng).unwrap();
        assert!(native > 1e-2, "{native}");
        assert!(upcast <= 1e-4, "{upcast}");
    }

    #[test]
    fn f64_is_exact_for_short_sums() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let e = bias_accumulation_error(8, 2, 3, NumericFormat::F64, AccumMode::NativeFormat, &mut rng).unwrap();
        assert!(e < 1e-15);
    }
}
