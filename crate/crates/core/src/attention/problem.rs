use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::NumericFormat;
use crate::tensor::Tensor;

/// The four biased axial attention variants of the Evoformer trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    MsaRowWise,
    MsaColumnWise,
    TriangularStartNode,
    TriangularEndNode,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        Self::MsaRowWise,
        Self::MsaColumnWise,
        Self::TriangularStartNode,
        Self::TriangularEndNode,
    ];

    /// Column-wise MSA attention is the only variant without a pair bias.
    pub fn has_bias(self) -> bool {
        !matches!(self, Self::MsaColumnWise)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MsaRowWise => "msa_row_wise",
            Self::MsaColumnWise => "msa_column_wise",
            Self::TriangularStartNode => "triangular_start_node",
            Self::TriangularEndNode => "triangular_end_node",
        }
    }

    /// Whether the attended axis is the first axis of the raw layout.
    fn attends_first_axis(self) -> bool {
        matches!(self, Self::MsaColumnWise | Self::TriangularEndNode)
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown attention variant `{s}`")))
    }
}

/// Extents of one attention instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    /// Axis that is not attended over.
    pub batch: usize,
    /// Attended axis.
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl ProblemDims {
    pub fn new(batch: usize, len: usize, heads: usize, head_dim: usize) -> Result<Self> {
        let dims = Self {
            batch,
            len,
            heads,
            head_dim,
        };
        if batch == 0 || len == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::validation(format!(
                "attention extents must be positive: {dims:?}"
            )));
        }
        Ok(dims)
    }

    pub fn qkv_shape(&self) -> [usize; 4] {
        [self.batch, self.len, self.heads, self.head_dim]
    }

    pub fn bias_shape(&self) -> [usize; 3] {
        [self.heads, self.len, self.len]
    }

    pub fn logits_shape(&self) -> [usize; 4] {
        [self.heads, self.batch, self.len, self.len]
    }

    pub fn stats_shape(&self) -> [usize; 3] {
        [self.heads, self.batch, self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProblem {
    variant: AttentionVariant,
    dims: ProblemDims,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: Option<Tensor>,
    scale: f64,
}

impl AttentionProblem {
    /// Validate shapes and formats. `scale` defaults to `1/sqrt(head_dim)`.
    pub fn new(variant: AttentionVariant, q: Tensor, k: Tensor, v: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if q.rank() != 4 {
            return Err(Error::validation(format!(
                "Q must be rank 4 (B, L, H, D), got {:?}",
                q.shape()
            )));
        }
        let s = q.shape();
        let dims = ProblemDims::new(s[0], s[1], s[2], s[3])?;
        for (name, t) in [("K", &k), ("V", &v)] {
            if t.shape() != q.shape() {
                return Err(Error::validation(format!(
                    "{name} shape {:?} differs from Q shape {:?}",
                    t.shape(),
                    q.shape()
                )));
            }
        }
        match (&bias, variant.has_bias()) {
            (Some(b), true) if b.shape() != dims.bias_shape() => {
                return Err(Error::validation(format!(
                    "bias shape {:?}, expected {:?}",
                    b.shape(),
                    dims.bias_shape()
                )))
            }
            (None, true) => return Err(Error::validation(format!("{variant} requires a bias"))),
            (Some(_), false) => return Err(Error::validation(format!("{variant} takes no bias"))),
            _ => {}
        }
        let fmt = q.format();
        if k.format() != fmt || v.format() != fmt || bias.as_ref().is_some_and(|b| b.format() != fmt) {
            return Err(Error::validation("Q, K, V and bias must share one numeric format"));
        }
        Ok(Self {
            variant,
            dims,
            q,
            k,
            v,
            bias,
            scale: 1.0 / (dims.head_dim as f64).sqrt(),
        })
    }

    /// Uniform `[-1, 1)` inputs.
    pub fn random<R: Rng>(
        variant: AttentionVariant,
        dims: ProblemDims,
        format: NumericFormat,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = dims.qkv_shape();
        let q = Tensor::random(&shape, format, rng)?;
        let k = Tensor::random(&shape, format, rng)?;
        let v = Tensor::random(&shape, format, rng)?;
        let bias = if variant.has_bias() {
            Some(Tensor::random(&dims.bias_shape(), format, rng)?)
        } else {
            None
        };
        Self::new(variant, q, k, v, bias)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::NumericInput(format!("scale {scale} is not finite")));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn variant(&self) -> AttentionVariant {
        self.variant
    }
    pub fn dims(&self) -> ProblemDims {
        self.dims
    }
    pub fn format(&self) -> NumericFormat {
        self.q.format()
    }
    pub fn q(&self) -> &Tensor {
        &self.q
    }
    pub fn k(&self) -> &Tensor {
        &self.k
    }
    pub fn v(&self) -> &Tensor {
        &self.v
    }
    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Replace one input tensor (same shape and format), e.g. for perturbation.
    pub fn with_input(mut self, which: Input, t: Tensor) -> Result<Self> {
        let slot = match which {
            Input::Q => &mut self.q,
            Input::K => &mut self.k,
            Input::V => &mut self.v,
            Input::Bias => self
                .bias
                .as_mut()
                .ok_or_else(|| Error::validation(format!("{} takes no bias", self.variant)))?,
        };
        if slot.shape() != t.shape() || slot.format() != t.format() {
            return Err(Error::validation(format!(
                "replacement for {which:?} has shape {:?}/{}, expected {:?}/{}",
                t.shape(),
                t.format(),
                slot.shape(),
                slot.format()
            )));
        }
        *slot = t;
        Ok(self)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        self.q.check_finite("Q")?;
        self.k.check_finite("K")?;
        self.v.check_finite("V")?;
        if let Some(b) = &self.bias {
            b.check_finite("bias")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Input {
    Q,
    K,
    V,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    /// Present iff the problem has a bias; stored in F32 or wider.
    pub dbias: Option<Tensor>,
}

impl AttentionGrads {
    pub fn get(&self, which: Input) -> Option<&Tensor> {
        match which {
            Input::Q => Some(&self.dq),
            Input::K => Some(&self.dk),
            Input::V => Some(&self.dv),
            Input::Bias => self.dbias.as_ref(),
        }
    }
}

/// Axis mapping from a raw rank-4 representation to canonical `(B, L, H, D)`.
///
/// MSA variants take raw input as `(N_msa, N_res, H, D)`; triangular variants
/// as `(N_res, N_res, H, D)`. Row-wise and starting-node attention attend over
/// the second axis (identity mapping); column-wise and ending-node attention
/// attend over the first axis (the two leading axes are swapped).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisMapping {
    pub swap_leading: bool,
}

impl AxisMapping {
    const SWAP: [usize; 4] = [1, 0, 2, 3];

    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        check_rank4(raw)?;
        if self.swap_leading {
            raw.permute(&Self::SWAP)
        } else {
            Ok(raw.clone())
        }
    }

    /// Map a canonical tensor back to the raw layout.
    pub fn invert(&self, canonical: &Tensor) -> Result<Tensor> {
        // swapping two axes is its own inverse
        self.apply(canonical)
    }
}

pub fn layout_from_msa(variant: AttentionVariant, raw: &Tensor) -> Result<(Tensor, AxisMapping)> {
    check_rank4(raw)?;
    let mapping = AxisMapping {
        swap_leading: variant.attends_first_axis(),
    };
    Ok((mapping.apply(raw)?, mapping))
}

fn check_rank4(t: &Tensor) -> Result<()> {
    if t.rank() != 4 {
        return Err(Error::validation(format!(
            "expected a rank-4 tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}
