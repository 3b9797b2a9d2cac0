#![allow(dead_code)]

use memlab::attention::{AttentionProblem, AttentionVariant, ProblemDims, TileConfig};
use memlab::{NumericFormat, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Straight-line f64 attention: returns `(output (B, L, H, D), probs (H, B, L, L))`.
pub fn oracle_forward(p: &AttentionProblem) -> (Vec<f64>, Vec<f64>) {
    let ProblemDims {
        batch,
        len,
        heads,
        head_dim,
    } = p.dims();
    let (q, k, v) = (p.q().data(), p.k().data(), p.v().data());
    let at = |b: usize, i: usize, h: usize| ((b * len + i) * heads + h) * head_dim;
    let mut out = vec![0.0; batch * len * heads * head_dim];
    let mut probs = vec![0.0; heads * batch * len * len];
    for h in 0..heads {
        for b in 0..batch {
            for i in 0..len {
                let s: Vec<f64> = (0..len)
                    .map(|j| {
                        let dot: f64 = (0..head_dim).map(|d| q[at(b, i, h) + d] * k[at(b, j, h) + d]).sum();
                        let bias = p.bias().map_or(0.0, |t| t.data()[(h * len + i) * len + j]);
                        dot * p.scale() + bias
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..len {
                    probs[((h * batch + b) * len + i) * len + j] = e[j] / z;
                    for d in 0..head_dim {
                        out[at(b, i, h) + d] += e[j] / z * v[at(b, j, h) + d];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// `sum_b dS[h, b]` in ascending `b`, with `dS = P * (dP - rowsum(P * dP))`.
pub fn oracle_dbias(p: &AttentionProblem, probs: &[f64], d_out: &[f64]) -> Vec<f64> {
    let ProblemDims {
        batch,
        len,
        heads,
        head_dim,
    } = p.dims();
    let v = p.v().data();
    let at = |b: usize, i: usize, h: usize| ((b * len + i) * heads + h) * head_dim;
    let mut acc = vec![0.0; heads * len * len];
    for h in 0..heads {
        for b in 0..batch {
            for i in 0..len {
                let pr = &probs[((h * batch + b) * len + i) * len..][..len];
                let dp: Vec<f64> = (0..len)
                    .map(|j| {
                        let mut s = 0.0;
                        for d in 0..head_dim {
                            s += d_out[at(b, i, h) + d] * v[at(b, j, h) + d];
                        }
                        s
                    })
                    .collect();
                let mut rowsum = 0.0;
                for j in 0..len {
                    rowsum += pr[j] * dp[j];
                }
                for j in 0..len {
                    acc[(h * len + i) * len + j] += pr[j] * (dp[j] - rowsum);
                }
            }
        }
    }
    acc
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random small problem and a tiling that usually leaves ragged edges.
pub fn random_case(
    variant: AttentionVariant,
    fmt: NumericFormat,
    rng: &mut ChaCha8Rng,
) -> (AttentionProblem, TileConfig) {
    let dims = ProblemDims::new(
        rng.gen_range(1..=3),
        rng.gen_range(1..=40),
        rng.gen_range(1..=3),
        rng.gen_range(1..=8),
    )
    .unwrap();
    let tc = TileConfig::new(
        rng.gen_range(1..=dims.len + 3),
        rng.gen_range(1..=dims.len + 3),
        rng.gen_range(1..=dims.batch),
    )
    .unwrap();
    (AttentionProblem::random(variant, dims, fmt, rng).unwrap(), tc)
}

pub fn random_tensor(shape: &[usize], fmt: NumericFormat, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random(shape, fmt, rng).unwrap()
}
