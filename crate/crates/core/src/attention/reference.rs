//! Fully materialising attention: the correctness oracle for the tiled kernels.
//!
//! Forward keeps the whole `(H, B, L, L)` logits and probability tensors and
//! backward adds a third one for the logits gradient. When a ledger is given,
//! these allocations are recorded under the `attn.ref.*` labels.

use num_traits::{Float, Zero};

use super::problem::{AttentionGrads, AttentionProblem, ProblemDims};
use crate::error::{Error, Result};
use crate::format::{with_arith, Arith, NumericFormat};
use crate::memory::AllocationLedger;
use crate::tensor::Tensor;

pub const LOGITS_LABEL: &str = "attn.ref.logits";
pub const PROBS_LABEL: &str = "attn.ref.probs";
pub const GRAD_LOGITS_LABEL: &str = "attn.ref.grad_logits";

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceForward {
    /// `(B, L, H, D)`
    pub output: Tensor,
    /// `(H, B, L, L)`
    pub logits: Tensor,
    /// `(H, B, L, L)`
    pub probs: Tensor,
}

fn square_bytes(dims: &ProblemDims, fmt: NumericFormat) -> u64 {
    (dims.heads * dims.batch * dims.len * dims.len) as u64 * fmt.bytes()
}

/// Record the allocations the naive forward makes, without computing.
pub fn record_naive_forward(dims: &ProblemDims, fmt: NumericFormat, ledger: &mut AllocationLedger) -> Result<()> {
    let bytes = square_bytes(dims, fmt);
    ledger.alloc(LOGITS_LABEL, bytes)?;
    ledger.alloc(PROBS_LABEL, bytes)
}

/// Record the allocations the naive backward makes, without computing.
pub fn record_naive_backward(dims: &ProblemDims, fmt: NumericFormat, ledger: &mut AllocationLedger) -> Result<()> {
    let bytes = square_bytes(dims, fmt);
    ledger.alloc(GRAD_LOGITS_LABEL, bytes)?;
    ledger.free(GRAD_LOGITS_LABEL, bytes)
}

pub fn attn_forward_ref(p: &AttentionProblem) -> Result<ReferenceForward> {
    p.check_finite()?;
    let fmt = p.format();
    let (logits, probs, output) = with_arith!(fmt, |ar| forward_kernel(ar, p));
    let dims = p.dims();
    let fwd = ReferenceForward {
        output: Tensor::from_raw(dims.qkv_shape().to_vec(), output, fmt),
        logits: Tensor::from_raw(dims.logits_shape().to_vec(), logits, fmt),
        probs: Tensor::from_raw(dims.logits_shape().to_vec(), probs, fmt),
    };
    fwd.output.check_finite("attention output")?;
    Ok(fwd)
}

/// Forward with its `(H, B, L, L)` allocations recorded in `ledger`. The
/// logits and probabilities stay live (they are returned to the caller).
pub fn attn_forward_ref_logged(p: &AttentionProblem, ledger: &mut AllocationLedger) -> Result<ReferenceForward> {
    ledger.ensure_open()?;
    record_naive_forward(&p.dims(), p.format(), ledger)?;
    attn_forward_ref(p)
}

fn forward_kernel<A: Arith>(ar: A, p: &AttentionProblem) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ProblemDims {
        batch,
        len,
        heads,
        head_dim,
    } = p.dims();
    let (q, k, v) = (p.q().data(), p.k().data(), p.v().data());
    let bias = p.bias().map(Tensor::data);
    let scale = ar.load(p.scale());
    let at = |b: usize, i: usize, h: usize| ((b * len + i) * heads + h) * head_dim;

    let mut logits = vec![0.0; heads * batch * len * len];
    let mut probs = vec![0.0; logits.len()];
    let mut out = vec![0.0; batch * len * heads * head_dim];
    let mut exps = vec![A::T::zero(); len];
    for h in 0..heads {
        for b in 0..batch {
            for i in 0..len {
                let row = ((h * batch + b) * len + i) * len;
                let qi = at(b, i, h);
                for j in 0..len {
                    let kj = at(b, j, h);
                    let mut dot = A::T::zero();
                    for d in 0..head_dim {
                        dot = ar.fix(dot + ar.fix(ar.load(q[qi + d]) * ar.load(k[kj + d])));
                    }
                    let mut s = ar.fix(scale * dot);
                    if let Some(bias) = bias {
                        s = ar.fix(s + ar.load(bias[(h * len + i) * len + j]));
                    }
                    logits[row + j] = ar.store(s);
                }
                // safe softmax; the output is normalised once after the
                // weighted sum of unnormalised exponentials
                let max = ar.load(logits[row..row + len].iter().copied().fold(f64::NEG_INFINITY, f64::max));
                let mut sum = A::T::zero();
                for j in 0..len {
                    let e = ar.fix(ar.fix(ar.load(logits[row + j]) - max).exp());
                    sum = ar.fix(sum + e);
                    exps[j] = e;
                }
                for j in 0..len {
                    probs[row + j] = ar.store(ar.fix(exps[j] / sum));
                }
                for d in 0..head_dim {
                    let mut acc = A::T::zero();
                    for (j, &e) in exps.iter().enumerate() {
                        acc = ar.fix(acc + ar.fix(e * ar.load(v[at(b, j, h) + d])));
                    }
                    out[qi + d] = ar.store(ar.fix(acc / sum));
                }
            }
        }
    }
    (logits, probs, out)
}

pub fn attn_backward_ref(p: &AttentionProblem, probs: &Tensor, d_out: &Tensor) -> Result<AttentionGrads> {
    let dims = p.dims();
    if probs.shape() != dims.logits_shape() {
        return Err(Error::validation(format!(
            "probabilities shape {:?}, expected {:?}",
            probs.shape(),
            dims.logits_shape()
        )));
    }
    if d_out.shape() != dims.qkv_shape() {
        return Err(Error::validation(format!(
            "output gradient shape {:?}, expected {:?}",
            d_out.shape(),
            dims.qkv_shape()
        )));
    }
    if probs.format() != p.format() || d_out.format() != p.format() {
        return Err(Error::validation(
            "probabilities and output gradient must use the problem format",
        ));
    }
    d_out.check_finite("output gradient")?;
    let fmt = p.format();
    let grads = with_arith!(fmt, |ar| backward_kernel(ar, p, probs.data(), d_out.data()));
    let shape = dims.qkv_shape().to_vec();
    Ok(AttentionGrads {
        dq: Tensor::from_raw(shape.clone(), grads.dq, fmt),
        dk: Tensor::from_raw(shape.clone(), grads.dk, fmt),
        dv: Tensor::from_raw(shape, grads.dv, fmt),
        dbias: grads
            .dbias
            .map(|d| Tensor::from_raw(dims.bias_shape().to_vec(), d, fmt.at_least_f32())),
    })
}

pub fn attn_backward_ref_logged(
    p: &AttentionProblem,
    probs: &Tensor,
    d_out: &Tensor,
    ledger: &mut AllocationLedger,
) -> Result<AttentionGrads> {
    ledger.ensure_open()?;
    let bytes = square_bytes(&p.dims(), p.format());
    ledger.alloc(GRAD_LOGITS_LABEL, bytes)?;
    let grads = attn_backward_ref(p, probs, d_out);
    ledger.free(GRAD_LOGITS_LABEL, bytes)?;
    grads
}

struct RawGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dbias: Option<Vec<f64>>,
}

fn backward_kernel<A: Arith>(ar: A, p: &AttentionProblem, probs: &[f64], d_out: &[f64]) -> RawGrads {
    let ProblemDims {
        batch,
        len,
        heads,
        head_dim,
    } = p.dims();
    let (q, k, v) = (p.q().data(), p.k().data(), p.v().data());
    let scale = ar.load(p.scale());
    let at = |b: usize, i: usize, h: usize| ((b * len + i) * heads + h) * head_dim;
    let n = batch * len * heads * head_dim;
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let acc_fmt = p.format().at_least_f32();
    let mut dbias = p.bias().map(|_| vec![0.0; heads * len * len]);

    let mut d_logits = vec![A::T::zero(); len * len];
    for h in 0..heads {
        for b in 0..batch {
            let base = (h * batch + b) * len * len;
            let pr = |i: usize, j: usize| ar.load(probs[base + i * len + j]);
            // dV[j] = sum_i P[i, j] dO[i]
            for j in 0..len {
                for d in 0..head_dim {
                    let mut acc = A::T::zero();
                    for i in 0..len {
                        acc = ar.fix(acc + ar.fix(pr(i, j) * ar.load(d_out[at(b, i, h) + d])));
                    }
                    dv[at(b, j, h) + d] = ar.store(acc);
                }
            }
            // dS = P * (dP - rowsum(P * dP))
            for i in 0..len {
                let row = &mut d_logits[i * len..(i + 1) * len];
                for (j, slot) in row.iter_mut().enumerate() {
                    let mut dp = A::T::zero();
                    for d in 0..head_dim {
                        dp = ar.fix(dp + ar.fix(ar.load(d_out[at(b, i, h) + d]) * ar.load(v[at(b, j, h) + d])));
                    }
                    *slot = dp;
                }
                let mut rowsum = A::T::zero();
                for (j, &dp) in row.iter().enumerate() {
                    rowsum = ar.fix(rowsum + ar.fix(pr(i, j) * dp));
                }
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = ar.fix(pr(i, j) * ar.fix(*slot - rowsum));
                }
            }
            for i in 0..len {
                for d in 0..head_dim {
                    let mut acc = A::T::zero();
                    for j in 0..len {
                        acc = ar.fix(acc + ar.fix(d_logits[i * len + j] * ar.load(k[at(b, j, h) + d])));
                    }
                    dq[at(b, i, h) + d] = ar.store(ar.fix(scale * acc));
                }
            }
            for j in 0..len {
                for d in 0..head_dim {
                    let mut acc = A::T::zero();
                    for i in 0..len {
                        acc = ar.fix(acc + ar.fix(d_logits[i * len + j] * ar.load(q[at(b, i, h) + d])));
                    }
                    dk[at(b, j, h) + d] = ar.store(ar.fix(scale * acc));
                }
            }
            if let Some(db) = dbias.as_mut() {
                let slice = &mut db[h * len * len..(h + 1) * len * len];
                for (acc, &ds) in slice.iter_mut().zip(&d_logits) {
                    *acc = acc_fmt.round(*acc + ar.store(ds));
                }
            }
        }
    }
    RawGrads { dq, dk, dv, dbias }
}
