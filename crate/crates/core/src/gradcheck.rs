//! Central finite-difference gradient checks for the attention backward passes.
//!
//! The scalar loss is `sum(O * dO)`, so its gradient with respect to every
//! input is exactly what the backward pass computes for output gradient `dO`.
//! Only forward evaluations are used here.

use crate::attention::{
    attn_backward_ref, attn_backward_tiled, attn_forward_ref, attn_forward_tiled, AccumPolicy, AttentionGrads,
    AttentionProblem, Input, TileConfig,
};
use crate::error::{Error, Result};
use crate::memory::AllocationLedger;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Reference,
    Tiled(TileConfig),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Reference => "ref",
            Backend::Tiled(_) => "tiled",
        }
    }

    pub fn forward(&self, p: &AttentionProblem) -> Result<Tensor> {
        match self {
            Backend::Reference => Ok(attn_forward_ref(p)?.output),
            Backend::Tiled(tc) => Ok(attn_forward_tiled(p, tc, &mut AllocationLedger::new())?.0),
        }
    }

    pub fn backward(&self, p: &AttentionProblem, d_out: &Tensor) -> Result<AttentionGrads> {
        match self {
            Backend::Reference => {
                let fwd = attn_forward_ref(p)?;
                attn_backward_ref(p, &fwd.probs, d_out)
            }
            Backend::Tiled(tc) => {
                let mut ledger = AllocationLedger::new();
                let (o, stats) = attn_forward_tiled(p, tc, &mut ledger)?;
                attn_backward_tiled(p, &o, &stats, d_out, tc, &AccumPolicy::default(), &mut ledger)
            }
        }
    }
}

fn loss(o: &Tensor, d_out: &Tensor) -> f64 {
    o.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `sum(forward(p) * d_out)` with respect to `which`.
pub fn finite_difference(
    backend: &Backend,
    p: &AttentionProblem,
    d_out: &Tensor,
    which: Input,
    step: f64,
) -> Result<Tensor> {
    let base = match which {
        Input::Q => p.q(),
        Input::K => p.k(),
        Input::V => p.v(),
        Input::Bias => p
            .bias()
            .ok_or_else(|| Error::validation(format!("{} has no bias", p.variant())))?,
    };
    let mut grad = Vec::with_capacity(base.len());
    for idx in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut data = base.data().to_vec();
            data[idx] += delta;
            let t = Tensor::new(base.shape(), data, base.format())?;
            let perturbed = p.clone().with_input(which, t)?;
            Ok(loss(&backend.forward(&perturbed)?, d_out))
        };
        grad.push((eval(step)? - eval(-step)?) / (2.0 * step));
    }
    Tensor::new(base.shape(), grad, base.format().at_least_f32())
}

/// `max |analytic - fd| / max |fd|`: error relative to the gradient's scale.
pub fn relative_error(analytic: &Tensor, fd: &Tensor) -> Result<f64> {
    let scale = fd.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(analytic.max_abs_diff(fd)? / scale.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub input: Input,
    pub max_rel_err: f64,
}

/// Check every gradient the problem has against finite differences.
pub fn check_gradients(backend: &Backend, p: &AttentionProblem, d_out: &Tensor, step: f64) -> Result<Vec<GradCheck>> {
    let grads = backend.backward(p, d_out)?;
    let mut inputs = vec![Input::Q, Input::K, Input::V];
    if p.bias().is_some() {
        inputs.push(Input::Bias);
    }
    inputs
        .into_iter()
        .map(|input| {
            let fd = finite_difference(backend, p, d_out, input, step)?;
            let analytic = grads.get(input).expect("gradient present for every checked input");
            Ok(GradCheck {
                input,
                max_rel_err: relative_error(analytic, &fd)?,
            })
        })
        .collect()
}

pub fn input_name(input: Input) -> &'static str {
    match input {
        Input::Q => "dQ",
        Input::K => "dK",
        Input::V => "dV",
        Input::Bias => "dBias",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionVariant, ProblemDims};
    use crate::format::NumericFormat;
    use rand::SeedableRng;

    #[test]
    fn reference_and_tiled_pass_at_small_dims() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let dims = ProblemDims::new(2, 3, 1, 2).unwrap();
        let p = AttentionProblem::random(AttentionVariant::MsaRowWise, dims, NumericFormat::F64, &mut rng).unwrap();
        let d_out = Tensor::random(&dims.qkv_shape(), NumericFormat::F64, &mut rng).unwrap();
        for backend in [Backend::Reference, Backend::Tiled(TileConfig::new(2, 2, 1).unwrap())] {
            let checks = check_gradients(&backend, &p, &d_out, 1e-5).unwrap();
            assert_eq!(checks.len(), 4);
            for c in checks {
                assert!(
                    c.max_rel_err <= 1e-6,
                    "{} {:?}: {}",
                    backend.name(),
                    c.input,
                    c.max_rel_err
                );
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let dims = ProblemDims::new(1, 3, 1, 2).unwrap();
        let p = AttentionProblem::random(AttentionVariant::MsaColumnWise, dims, NumericFormat::F64, &mut rng).unwrap();
        let d_out = Tensor::random(&dims.qkv_shape(), NumericFormat::F64, &mut rng).unwrap();
        let fd = finite_difference(&Backend::Reference, &p, &d_out, Input::V, 1e-5).unwrap();
        let g = Backend::Reference.backward(&p, &d_out).unwrap();
        assert!(relative_error(&g.dv, &fd).unwrap() < 1e-8);
        // dK in place of dV is not a match
        assert!(relative_error(&g.dk, &fd).unwrap() > 1e-2);
        assert!(finite_difference(&Backend::Reference, &p, &d_out, Input::Bias, 1e-5).is_err());
    }
}
