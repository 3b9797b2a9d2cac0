mod common;

use common::*;
use memlab::attention::*;
use memlab::memory::AllocationLedger;
use memlab::{NumericFormat, Tensor};

#[test]
fn tiled_forward_matches_reference_and_oracle() {
    let mut r = rng(100);
    for variant in AttentionVariant::ALL {
        for (fmt, tol) in [(NumericFormat::F32, 1e-5), (NumericFormat::F64, 1e-10)] {
            for _ in 0..50 {
                let (p, tc) = random_case(variant, fmt, &mut r);
                let (tiled, _) = attn_forward_tiled(&p, &tc, &mut AllocationLedger::new()).unwrap();
                let reference = attn_forward_ref(&p).unwrap().output;
                let diff = tiled.max_abs_diff(&reference).unwrap();
                assert!(diff <= tol, "{variant} {fmt} {:?} {tc:?}: {diff}", p.dims());
                let (oracle, _) = oracle_forward(&p);
                assert!(max_abs(tiled.data(), &oracle) <= tol, "{variant} {fmt} vs oracle");
            }
        }
    }
}

#[test]
fn reference_probabilities_match_oracle() {
    let mut r = rng(101);
    for variant in AttentionVariant::ALL {
        let (p, _) = random_case(variant, NumericFormat::F64, &mut r);
        let (_, probs) = oracle_forward(&p);
        assert!(max_abs(attn_forward_ref(&p).unwrap().probs.data(), &probs) <= 1e-14);
    }
}

#[test]
fn results_do_not_depend_on_tile_sizes() {
    let mut r = rng(102);
    let dims = ProblemDims::new(3, 37, 2, 5).unwrap();
    let p = AttentionProblem::random(AttentionVariant::TriangularStartNode, dims, NumericFormat::F64, &mut r).unwrap();
    let d_out = random_tensor(&dims.qkv_shape(), NumericFormat::F64, &mut r);
    let run = |tc: TileConfig| {
        let mut ledger = AllocationLedger::new();
        let (o, stats) = attn_forward_tiled(&p, &tc, &mut ledger).unwrap();
        let g = attn_backward_tiled(&p, &o, &stats, &d_out, &tc, &AccumPolicy::default(), &mut ledger).unwrap();
        (o, g)
    };
    let (o0, g0) = run(TileConfig::covering(&dims));
    for (tq, tk, tb) in [(1, 1, 1), (4, 7, 2), (16, 16, 3), (37, 5, 1), (64, 64, 1)] {
        let (o, g) = run(TileConfig::new(tq, tk, tb).unwrap());
        assert!(o.max_abs_diff(&o0).unwrap() <= 1e-12);
        for input in [Input::Q, Input::K, Input::V, Input::Bias] {
            let d = g.get(input).unwrap().max_abs_diff(g0.get(input).unwrap()).unwrap();
            assert!(d <= 1e-12, "{input:?} with tiles {tq}x{tk}x{tb}: {d}");
        }
    }
}

#[test]
fn deterministic_runs_are_bit_identical() {
    let mut r = rng(103);
    let dims = ProblemDims::new(4, 30, 2, 4).unwrap();
    let p = AttentionProblem::random(AttentionVariant::MsaRowWise, dims, NumericFormat::F32, &mut r).unwrap();
    let d_out = random_tensor(&dims.qkv_shape(), NumericFormat::F32, &mut r);
    let tc = TileConfig::new(8, 8, 1).unwrap();
    let run = || {
        let mut ledger = AllocationLedger::new();
        let (o, stats) = attn_forward_tiled(&p, &tc, &mut ledger).unwrap();
        let g = attn_backward_tiled(&p, &o, &stats, &d_out, &tc, &AccumPolicy::default(), &mut ledger).unwrap();
        (o, g, ledger.to_text())
    };
    let (o1, g1, l1) = run();
    let (o2, g2, l2) = run();
    assert_eq!(o1, o2);
    assert_eq!(g1, g2);
    assert_eq!(l1, l2);
}

#[test]
fn concurrent_bias_reduction_stays_close() {
    let mut r = rng(104);
    let dims = ProblemDims::new(16, 24, 2, 4).unwrap();
    let p = AttentionProblem::random(AttentionVariant::TriangularEndNode, dims, NumericFormat::F32, &mut r).unwrap();
    let d_out = random_tensor(&dims.qkv_shape(), NumericFormat::F32, &mut r);
    let tc = TileConfig::new(8, 8, 1).unwrap();
    let grads = |deterministic| {
        let mut ledger = AllocationLedger::new();
        let (o, stats) = attn_forward_tiled(&p, &tc, &mut ledger).unwrap();
        let pol = AccumPolicy {
            mode: AccumMode::UpcastF32,
            deterministic,
        };
        attn_backward_tiled(&p, &o, &stats, &d_out, &tc, &pol, &mut ledger).unwrap()
    };
    let seq = grads(true);
    let par = grads(false);
    let (a, b) = (seq.dbias.unwrap(), par.dbias.unwrap());
    let scale = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(a.max_abs_diff(&b).unwrap() / scale <= 1e-4);
    assert_eq!(seq.dq, par.dq);
}

#[test]
fn batch_permutation_equivariance() {
    let mut r = rng(105);
    let dims = ProblemDims::new(4, 12, 2, 3).unwrap();
    let p = AttentionProblem::random(AttentionVariant::MsaRowWise, dims, NumericFormat::F64, &mut r).unwrap();
    let perm = [2usize, 0, 3, 1];
    let permute_batch = |t: &Tensor| {
        let per = t.len() / dims.batch;
        let data: Vec<f64> = perm
            .iter()
            .flat_map(|&b| t.data()[b * per..(b + 1) * per].to_vec())
            .collect();
        Tensor::new(t.shape(), data, t.format()).unwrap()
    };
    let permuted = AttentionProblem::new(
        p.variant(),
        permute_batch(p.q()),
        permute_batch(p.k()),
        permute_batch(p.v()),
        p.bias().cloned(),
    )
    .unwrap();
    let tc = TileConfig::new(5, 5, 1).unwrap();
    let (o, _) = attn_forward_tiled(&p, &tc, &mut AllocationLedger::new()).unwrap();
    let (op, _) = attn_forward_tiled(&permuted, &tc, &mut AllocationLedger::new()).unwrap();
    assert_eq!(permute_batch(&o), op);
}

#[test]
fn msa_layouts_round_trip_through_attention() {
    let mut r = rng(106);
    let raw = random_tensor(&[5, 7, 2, 3], NumericFormat::F64, &mut r);
    for variant in AttentionVariant::ALL {
        let (canonical, map) = layout_from_msa(variant, &raw).unwrap();
        assert_eq!(map.invert(&canonical).unwrap(), raw);
    }
}
