//! Tiled biased attention with online softmax.
//!
//! The forward pass walks query tiles and streams key tiles through a running
//! max / denominator / output accumulator, so no `(H, B, L, L)` buffer ever
//! exists. The bias tile for a `(head, query tile, key tile)` position is
//! loaded into the logits tile buffer and shared by every batch row. Only the
//! per-row log-sum-exp is saved; backward recomputes probabilities tile by
//! tile from it and reduces the bias gradient over the batch axis.

use std::sync::Mutex;

use num_traits::{Float, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::problem::{AttentionGrads, AttentionProblem, ProblemDims};
use crate::error::{Error, Result};
use crate::format::{with_arith, Arith, NumericFormat};
use crate::memory::AllocationLedger;
use crate::tensor::Tensor;

pub const LOGITS_TILE_LABEL: &str = "attn.tiled.logits_tile";
pub const ACC_LABEL: &str = "attn.tiled.acc";
pub const ROW_STATE_LABEL: &str = "attn.tiled.row_state";
pub const STATS_LABEL: &str = "attn.tiled.stats";
pub const DELTA_LABEL: &str = "attn.tiled.delta";

/// Tile extents along the query, key and batch axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile_q: usize,
    pub tile_k: usize,
    pub tile_b: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_q: 64,
            tile_k: 64,
            tile_b: 1,
        }
    }
}

impl TileConfig {
    pub fn new(tile_q: usize, tile_k: usize, tile_b: usize) -> Result<Self> {
        let tc = Self { tile_q, tile_k, tile_b };
        tc.validate()?;
        Ok(tc)
    }

    /// One tile covering the whole problem.
    pub fn covering(dims: &ProblemDims) -> Self {
        Self {
            tile_q: dims.len,
            tile_k: dims.len,
            tile_b: dims.batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_q == 0 || self.tile_k == 0 || self.tile_b == 0 {
            return Err(Error::validation(format!("tile extents must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-row log-sum-exp of the logits, `(H, B, L)`, stored in F32 or wider.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStats {
    pub logsumexp: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumMode {
    /// Accumulate in F32 (or wider when the problem is F64).
    #[default]
    UpcastF32,
    /// Accumulate in the problem format, rounding after every addition.
    NativeFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumPolicy {
    pub mode: AccumMode,
    /// Reduce in ascending batch order; otherwise work units run concurrently
    /// and reduce in completion order.
    pub deterministic: bool,
}

impl Default for AccumPolicy {
    fn default() -> Self {
        Self {
            mode: AccumMode::UpcastF32,
            deterministic: true,
        }
    }
}

/// The `(tile_q, tile_k)` bias tile at `(i0, j0)` for head `h`, clipped at
/// the tensor edge. The same tile serves every batch row.
pub fn broadcast_bias_tile(bias: &Tensor, h: usize, i0: usize, j0: usize, tc: &TileConfig) -> Result<Tensor> {
    tc.validate()?;
    let s = bias.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::validation(format!("bias must be (H, L, L), got {s:?}")));
    }
    let (heads, len) = (s[0], s[1]);
    if h >= heads || i0 >= len || j0 >= len {
        return Err(Error::validation(format!(
            "bias tile origin (h={h}, i0={i0}, j0={j0}) outside (H={heads}, L={len})"
        )));
    }
    let rows = tc.tile_q.min(len - i0);
    let cols = tc.tile_k.min(len - j0);
    let mut out = vec![0.0; rows * cols];
    load_bias_tile(bias.data(), len, h, i0, j0, rows, cols, |x| x, &mut out);
    Ok(Tensor::from_raw(vec![rows, cols], out, bias.format()))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn load_bias_tile<T: Copy>(
    bias: &[f64],
    len: usize,
    h: usize,
    i0: usize,
    j0: usize,
    rows: usize,
    cols: usize,
    load: impl Fn(f64) -> T,
    out: &mut [T],
) {
    for r in 0..rows {
        let src = (h * len + i0 + r) * len + j0;
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(&bias[src..src + cols]) {
            *o = load(x);
        }
    }
}

/// Bias-gradient reduction over the broadcast (batch) axis.
#[derive(Debug, Clone)]
pub struct BiasGradAccumulator {
    heads: usize,
    len: usize,
    acc_format: NumericFormat,
    store_format: NumericFormat,
    data: Vec<f64>,
}

impl BiasGradAccumulator {
    /// `format` is the problem format; the policy decides the accumulation format.
    pub fn new(heads: usize, len: usize, format: NumericFormat, mode: AccumMode) -> Self {
        let acc_format = match mode {
            AccumMode::UpcastF32 => format.at_least_f32(),
            AccumMode::NativeFormat => format,
        };
        Self {
            heads,
            len,
            acc_format,
            store_format: format.at_least_f32(),
            data: vec![0.0; heads * len * len],
        }
    }

    /// Add a `(rows, cols)` tile of logits gradients at `(h, i0, j0)`.
    pub fn add_tile(&mut self, h: usize, i0: usize, j0: usize, tile: &Tensor) -> Result<()> {
        let s = tile.shape();
        if s.len() != 2 || h >= self.heads || i0 + s[0] > self.len || j0 + s[1] > self.len {
            return Err(Error::validation(format!(
                "gradient tile {s:?} at (h={h}, i0={i0}, j0={j0}) outside (H={}, L={})",
                self.heads, self.len
            )));
        }
        self.add_raw(h, i0, j0, s[0], s[1], tile.data().iter().copied());
        Ok(())
    }

    fn add_raw(
        &mut self,
        h: usize,
        i0: usize,
        j0: usize,
        rows: usize,
        cols: usize,
        mut vals: impl Iterator<Item = f64>,
    ) {
        let fmt = self.acc_format;
        for r in 0..rows {
            let dst = (h * self.len + i0 + r) * self.len + j0;
            for slot in &mut self.data[dst..dst + cols] {
                let x = vals.next().expect("tile holds rows * cols values");
                *slot = fmt.round(*slot + x);
            }
        }
    }

    pub fn finish(self) -> Tensor {
        let fmt = self.store_format;
        let data = self.data.into_iter().map(|x| fmt.round(x)).collect();
        Tensor::from_raw(vec![self.heads, self.len, self.len], data, fmt)
    }
}

/// Ledger shared by concurrently running work units.
struct SharedLedger<'a>(Mutex<&'a mut AllocationLedger>);

impl SharedLedger<'_> {
    fn alloc(&self, label: &str, bytes: u64) -> Result<()> {
        self.0.lock().expect("ledger lock").alloc(label, bytes)
    }
    fn free(&self, label: &str, bytes: u64) -> Result<()> {
        self.0.lock().expect("ledger lock").free(label, bytes)
    }
}

/// Transient buffers of one work unit, sized for a possibly clipped tile.
struct UnitBuffers {
    tile: u64,
    acc: u64,
    rows: u64,
}

impl UnitBuffers {
    fn new(rows: usize, cols: usize, head_dim: usize, elem: u64) -> Self {
        Self {
            tile: (rows * cols) as u64 * elem,
            acc: (rows * head_dim) as u64 * elem,
            rows: 2 * rows as u64 * elem,
        }
    }
    fn alloc(&self, ledger: &SharedLedger) -> Result<()> {
        ledger.alloc(LOGITS_TILE_LABEL, self.tile)?;
        ledger.alloc(ACC_LABEL, self.acc)?;
        ledger.alloc(ROW_STATE_LABEL, self.rows)
    }
    fn free(&self, ledger: &SharedLedger) -> Result<()> {
        ledger.free(ROW_STATE_LABEL, self.rows)?;
        ledger.free(ACC_LABEL, self.acc)?;
        ledger.free(LOGITS_TILE_LABEL, self.tile)
    }
}

/// Inputs converted once to the compute type.
struct Loaded<T> {
    dims: ProblemDims,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    scale: T,
}

impl<T: Copy> Loaded<T> {
    fn new<A: Arith<T = T>>(ar: A, p: &AttentionProblem) -> Self {
        let load = |t: &Tensor| t.data().iter().map(|&x| ar.load(x)).collect::<Vec<T>>();
        Self {
            dims: p.dims(),
            q: load(p.q()),
            k: load(p.k()),
            v: load(p.v()),
            scale: ar.load(p.scale()),
        }
    }

    #[inline]
    fn row(&self, b: usize, i: usize, h: usize) -> usize {
        let d = &self.dims;
        ((b * d.len + i) * d.heads + h) * d.head_dim
    }
}

/// Fill `tile` (rows x cols, starting at query i0 / key j0) with the logits
/// `scale * q.k + bias` for batch row `b` and head `h`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn logits_tile<A: Arith>(
    ar: A,
    x: &Loaded<A::T>,
    bias: Option<&[f64]>,
    b: usize,
    h: usize,
    i0: usize,
    j0: usize,
    rows: usize,
    cols: usize,
    tile: &mut [A::T],
) {
    let (len, head_dim) = (x.dims.len, x.dims.head_dim);
    match bias {
        Some(bias) => load_bias_tile(bias, len, h, i0, j0, rows, cols, |v| ar.load(v), tile),
        None => tile[..rows * cols].fill(A::T::zero()),
    }
    let has_bias = bias.is_some();
    for r in 0..rows {
        let qi = &x.q[x.row(b, i0 + r, h)..][..head_dim];
        for c in 0..cols {
            let kj = &x.k[x.row(b, j0 + c, h)..][..head_dim];
            let mut dot = A::T::zero();
            for (&a, &bb) in qi.iter().zip(kj) {
                dot = ar.fix(dot + ar.fix(a * bb));
            }
            let s = ar.fix(x.scale * dot);
            let slot = &mut tile[r * cols + c];
            *slot = if has_bias { ar.fix(s + *slot) } else { s };
        }
    }
}

/// Tiled forward. Returns the output `(B, L, H, D)` and per-row statistics.
pub fn attn_forward_tiled(
    p: &AttentionProblem,
    tc: &TileConfig,
    ledger: &mut AllocationLedger,
) -> Result<(Tensor, RowStats)> {
    ledger.ensure_open()?;
    tc.validate()?;
    p.check_finite()?;
    let dims = p.dims();
    let fmt = p.format();
    let stats_fmt = fmt.at_least_f32();
    let stats_bytes = (dims.heads * dims.batch * dims.len) as u64 * stats_fmt.bytes();
    ledger.alloc(STATS_LABEL, stats_bytes)?;
    let shared = SharedLedger(Mutex::new(ledger));
    let (out, lse) = with_arith!(fmt, |ar| forward_kernel(ar, p, tc, &shared))?;
    let output = Tensor::from_raw(dims.qkv_shape().to_vec(), out, fmt);
    output.check_finite("attention output")?;
    Ok((
        output,
        RowStats {
            logsumexp: Tensor::from_raw(dims.stats_shape().to_vec(), lse, stats_fmt),
        },
    ))
}

fn forward_kernel<A: Arith>(
    ar: A,
    p: &AttentionProblem,
    tc: &TileConfig,
    ledger: &SharedLedger,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = Loaded::new(ar, p);
    let ProblemDims {
        batch,
        len,
        heads,
        head_dim,
    } = x.dims;
    let bias = p.bias().map(Tensor::data);
    let fmt = p.format();
    let stats_fmt = fmt.at_least_f32();
    let mut out = vec![0.0; batch * len * heads * head_dim];
    let mut lse = vec![0.0; heads * batch * len];

    let tk = tc.tile_k.min(len);
    let mut tile = vec![A::T::zero(); tc.tile_q.min(len) * tk];
    let mut acc = vec![A::T::zero(); tc.tile_q.min(len) * head_dim];
    let mut m = vec![A::T::zero(); tc.tile_q.min(len)];
    let mut l = vec![A::T::zero(); tc.tile_q.min(len)];

    for h in 0..heads {
        for b0 in (0..batch).step_by(tc.tile_b) {
            for i0 in (0..len).step_by(tc.tile_q) {
                let rows = tc.tile_q.min(len - i0);
                let bufs = UnitBuffers::new(rows, tk, head_dim, fmt.bytes());
                bufs.alloc(ledger)?;
                for b in b0..(b0 + tc.tile_b).min(batch) {
                    m[..rows].fill(A::T::neg_infinity());
                    l[..rows].fill(A::T::zero());
                    acc[..rows * head_dim].fill(A::T::zero());
                    for j0 in (0..len).step_by(tk) {
                        let cols = tk.min(len - j0);
                        logits_tile(ar, &x, bias, b, h, i0, j0, rows, cols, &mut tile);
                        for r in 0..rows {
                            let s = &mut tile[r * cols..(r + 1) * cols];
                            let m_new = s.iter().copied().fold(m[r], A::T::max);
                            let alpha = ar.fix(ar.fix(m[r] - m_new).exp());
                            let mut rowsum = A::T::zero();
                            for e in s.iter_mut() {
                                *e = ar.fix(ar.fix(*e - m_new).exp());
                                rowsum = ar.fix(rowsum + *e);
                            }
                            l[r] = ar.fix(ar.fix(l[r] * alpha) + rowsum);
                            let a = &mut acc[r * head_dim..(r + 1) * head_dim];
                            for av in a.iter_mut() {
                                *av = ar.fix(*av * alpha);
                            }
                            for (c, &pe) in s.iter().enumerate() {
                                let vj = &x.v[x.row(b, j0 + c, h)..][..head_dim];
                                for (av, &vv) in a.iter_mut().zip(vj) {
                                    *av = ar.fix(*av + ar.fix(pe * vv));
                                }
                            }
                            m[r] = m_new;
                        }
                    }
                    for r in 0..rows {
                        let o = x.row(b, i0 + r, h);
                        for d in 0..head_dim {
                            out[o + d] = ar.store(ar.fix(acc[r * head_dim + d] / l[r]));
                        }
                        let (mr, lr) = (ar.store(m[r]), ar.store(l[r]));
                        lse[(h * batch + b) * len + i0 + r] = stats_fmt.round(mr + stats_fmt.round(lr.ln()));
                    }
                }
                bufs.free(ledger)?;
            }
        }
    }
    Ok((out, lse))
}

/// Tiled backward by recomputation from the saved row statistics.
pub fn attn_backward_tiled(
    p: &AttentionProblem,
    output: &Tensor,
    stats: &RowStats,
    d_out: &Tensor,
    tc: &TileConfig,
    pol: &AccumPolicy,
    ledger: &mut AllocationLedger,
) -> Result<AttentionGrads> {
    ledger.ensure_open()?;
    tc.validate()?;
    let dims = p.dims();
    let fmt = p.format();
    for (name, t) in [("output", output), ("output gradient", d_out)] {
        if t.shape() != dims.qkv_shape() || t.format() != fmt {
            return Err(Error::validation(format!(
                "{name} is {:?}/{}, expected {:?}/{fmt}",
                t.shape(),
                t.format(),
                dims.qkv_shape()
            )));
        }
        t.check_finite(name)?;
    }
    let lse = &stats.logsumexp;
    if lse.shape() != dims.stats_shape() || lse.format() != fmt.at_least_f32() {
        return Err(Error::validation(format!(
            "row statistics are {:?}/{}, expected {:?}/{}",
            lse.shape(),
            lse.format(),
            dims.stats_shape(),
            fmt.at_least_f32()
        )));
    }
    p.check_finite()?;

    let delta_bytes = (dims.heads * dims.batch * dims.len) as u64 * fmt.at_least_f32().bytes();
    ledger.alloc(DELTA_LABEL, delta_bytes)?;
    let shared = SharedLedger(Mutex::new(ledger));
    let raw = with_arith!(fmt, |ar| backward_kernel(ar, p, output, lse, d_out, tc, pol, &shared))?;
    let ledger = shared.0.into_inner().expect("ledger lock");
    ledger.free(DELTA_LABEL, delta_bytes)?;

    let shape = dims.qkv_shape().to_vec();
    Ok(AttentionGrads {
        dq: Tensor::from_raw(shape.clone(), raw.dq, fmt),
        dk: Tensor::from_raw(shape.clone(), raw.dk, fmt),
        dv: Tensor::from_raw(shape, raw.dv, fmt),
        dbias: raw.dbias.map(BiasGradAccumulator::finish),
    })
}

struct BackwardRaw {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dbias: Option<BiasGradAccumulator>,
}

/// Gradients of one `(head, batch row)` slice, each `L x D` in compute type.
struct SliceGrads<T> {
    h: usize,
    b: usize,
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
}

struct BackwardCtx<'a, A: Arith> {
    ar: A,
    x: Loaded<A::T>,
    bias: Option<&'a [f64]>,
    d_out: Vec<A::T>,
    /// `Σ_d dO·O` per `(b, i, h)`, laid out like the row statistics `(H, B, L)`.
    delta: Vec<A::T>,
    lse: Vec<A::T>,
    tc: TileConfig,
    elem_bytes: u64,
}

#[allow(clippy::too_many_arguments)]
fn backward_kernel<A: Arith>(
    ar: A,
    p: &AttentionProblem,
    output: &Tensor,
    lse: &Tensor,
    d_out: &Tensor,
    tc: &TileConfig,
    pol: &AccumPolicy,
    ledger: &SharedLedger,
) -> Result<BackwardRaw> {
    let x = Loaded::new(ar, p);
    let ProblemDims {
        batch,
        len,
        heads,
        head_dim,
    } = x.dims;
    let d_out: Vec<A::T> = d_out.data().iter().map(|&v| ar.load(v)).collect();
    let o = output.data();
    let mut delta = vec![A::T::zero(); heads * batch * len];
    for h in 0..heads {
        for b in 0..batch {
            for i in 0..len {
                let r = x.row(b, i, h);
                let mut acc = A::T::zero();
                for d in 0..head_dim {
                    acc = ar.fix(acc + ar.fix(d_out[r + d] * ar.load(o[r + d])));
                }
                delta[(h * batch + b) * len + i] = acc;
            }
        }
    }
    let ctx = BackwardCtx {
        ar,
        bias: p.bias().map(Tensor::data),
        d_out,
        delta,
        lse: lse.data().iter().map(|&v| ar.load(v)).collect(),
        tc: *tc,
        elem_bytes: p.format().bytes(),
        x,
    };
    let dbias = p
        .bias()
        .map(|_| Mutex::new(BiasGradAccumulator::new(heads, len, p.format(), pol.mode)));

    let slices: Vec<(usize, usize)> = (0..heads).flat_map(|h| (0..batch).map(move |b| (h, b))).collect();
    let results: Vec<SliceGrads<A::T>> = if pol.deterministic {
        slices
            .iter()
            .map(|&(h, b)| backward_slice(&ctx, h, b, dbias.as_ref(), ledger))
            .collect::<Result<_>>()?
    } else {
        slices
            .par_iter()
            .map(|&(h, b)| backward_slice(&ctx, h, b, dbias.as_ref(), ledger))
            .collect::<Result<_>>()?
    };

    let n = batch * len * heads * head_dim;
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for g in results {
        for i in 0..len {
            let dst = ctx.x.row(g.b, i, g.h);
            for d in 0..head_dim {
                let src = i * head_dim + d;
                dq[dst + d] = ar.store(ar.fix(ctx.x.scale * g.dq[src]));
                dk[dst + d] = ar.store(ar.fix(ctx.x.scale * g.dk[src]));
                dv[dst + d] = ar.store(g.dv[src]);
            }
        }
    }
    Ok(BackwardRaw {
        dq,
        dk,
        dv,
        dbias: dbias.map(|m| m.into_inner().expect("bias accumulator lock")),
    })
}

/// All query and key tiles of one `(head, batch row)`. dQ/dK are returned
/// unscaled; the bias gradient is pushed into `dbias` one tile at a time.
fn backward_slice<A: Arith>(
    ctx: &BackwardCtx<A>,
    h: usize,
    b: usize,
    dbias: Option<&Mutex<BiasGradAccumulator>>,
    ledger: &SharedLedger,
) -> Result<SliceGrads<A::T>> {
    let ar = ctx.ar;
    let x = &ctx.x;
    let ProblemDims {
        batch, len, head_dim, ..
    } = x.dims;
    let tc = &ctx.tc;
    let tk = tc.tile_k.min(len);
    let zero = A::T::zero();
    let mut dq = vec![zero; len * head_dim];
    let mut dk = vec![zero; len * head_dim];
    let mut dv = vec![zero; len * head_dim];
    let mut tile = vec![zero; tc.tile_q.min(len) * tk];
    let stat_row = (h * batch + b) * len;

    for i0 in (0..len).step_by(tc.tile_q) {
        let rows = tc.tile_q.min(len - i0);
        let bufs = UnitBuffers::new(rows, tk, head_dim, ctx.elem_bytes);
        bufs.alloc(ledger)?;
        for j0 in (0..len).step_by(tk) {
            let cols = tk.min(len - j0);
            logits_tile(ar, x, ctx.bias, b, h, i0, j0, rows, cols, &mut tile);
            for r in 0..rows {
                let i = i0 + r;
                let lse_i = ctx.lse[stat_row + i];
                let delta_i = ctx.delta[stat_row + i];
                let dout_i = &ctx.d_out[x.row(b, i, h)..][..head_dim];
                let q_i = &x.q[x.row(b, i, h)..][..head_dim];
                for c in 0..cols {
                    let j = j0 + c;
                    let slot = &mut tile[r * cols + c];
                    let prob = ar.fix(ar.fix(*slot - lse_i).exp());
                    let v_j = &x.v[x.row(b, j, h)..][..head_dim];
                    let mut dp = zero;
                    for (&g, &vv) in dout_i.iter().zip(v_j) {
                        dp = ar.fix(dp + ar.fix(g * vv));
                    }
                    for (acc, &g) in dv[j * head_dim..(j + 1) * head_dim].iter_mut().zip(dout_i) {
                        *acc = ar.fix(*acc + ar.fix(prob * g));
                    }
                    let ds = ar.fix(prob * ar.fix(dp - delta_i));
                    *slot = ds;
                    let k_j = &x.k[x.row(b, j, h)..][..head_dim];
                    for (acc, &kk) in dq[i * head_dim..(i + 1) * head_dim].iter_mut().zip(k_j) {
                        *acc = ar.fix(*acc + ar.fix(ds * kk));
                    }
                    for (acc, &qq) in dk[j * head_dim..(j + 1) * head_dim].iter_mut().zip(q_i) {
                        *acc = ar.fix(*acc + ar.fix(ds * qq));
                    }
                }
            }
            if let Some(acc) = dbias {
                let vals = tile[..rows * cols].iter().map(|&v| ar.store(v));
                acc.lock()
                    .expect("bias accumulator lock")
                    .add_raw(h, i0, j0, rows, cols, vals);
            }
        }
        bufs.free(ledger)?;
    }
    Ok(SliceGrads { h, b, dq, dk, dv })
}
