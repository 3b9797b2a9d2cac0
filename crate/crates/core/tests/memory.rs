mod common;

use common::*;
use memlab::attention::*;
use memlab::memory::*;
use memlab::NumericFormat;

#[test]
fn naive_peak_equals_analytic_model() {
    let mut r = rng(300);
    let dims = ProblemDims::new(8, 256, 2, 8).unwrap();
    let p = AttentionProblem::random(AttentionVariant::MsaRowWise, dims, NumericFormat::F32, &mut r).unwrap();
    let d_out = random_tensor(&dims.qkv_shape(), NumericFormat::F32, &mut r);
    let mut ledger = AllocationLedger::new();
    let fwd = attn_forward_ref_logged(&p, &mut ledger).unwrap();
    attn_backward_ref_logged(&p, &fwd.probs, &d_out, &mut ledger).unwrap();
    let ad = AttentionDims::new(2, 8, 256, 8, 4).unwrap();
    let analytic = analytic_attention_bytes(&ad, AttentionMode::Naive, Phase::Backward, None, 1).unwrap();
    assert_eq!(measure_peak(&ledger).unwrap().peak_bytes, analytic.total());
    assert_eq!(ledger.peak(), 3 * 2 * 8 * 256 * 256 * 4);
}

#[test]
fn tiled_peak_respects_analytic_bound() {
    let mut r = rng(301);
    for (b, l, h, d, tq, tk) in [(2, 128, 2, 8, 64, 64), (3, 100, 1, 4, 32, 16), (1, 50, 2, 8, 64, 64)] {
        let dims = ProblemDims::new(b, l, h, d).unwrap();
        let p = AttentionProblem::random(AttentionVariant::MsaRowWise, dims, NumericFormat::F32, &mut r).unwrap();
        let tc = TileConfig::new(tq, tk, 1).unwrap();
        let mut ledger = AllocationLedger::new();
        attn_forward_tiled(&p, &tc, &mut ledger).unwrap();
        let ad = AttentionDims::new(h as u64, b as u64, l as u64, d as u64, 4).unwrap();
        let bound = analytic_attention_bytes(&ad, AttentionMode::Tiled, Phase::Forward, Some(&tc), 1).unwrap();
        let peak = measure_peak(&ledger).unwrap().peak_bytes;
        assert!(peak <= bound.total(), "{peak} > {}", bound.total());
        if l % tq == 0 && l % tk == 0 {
            assert_eq!(peak, bound.total());
        }
    }
}

#[test]
fn tiled_backward_peak_is_linear_in_length() {
    let mut r = rng(302);
    let peak_at = |l: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let dims = ProblemDims::new(2, l, 2, 4).unwrap();
        let p = AttentionProblem::random(AttentionVariant::MsaRowWise, dims, NumericFormat::F32, r).unwrap();
        let d_out = random_tensor(&dims.qkv_shape(), NumericFormat::F32, r);
        let tc = TileConfig::new(16, 16, 1).unwrap();
        let mut ledger = AllocationLedger::new();
        let (o, stats) = attn_forward_tiled(&p, &tc, &mut ledger).unwrap();
        attn_backward_tiled(&p, &o, &stats, &d_out, &tc, &AccumPolicy::default(), &mut ledger).unwrap();
        measure_peak(&ledger).unwrap().peak_bytes
    };
    let (a, b) = (peak_at(64, &mut r), peak_at(128, &mut r));
    assert!(b < 2 * a + 4096, "{a} -> {b}");
}

#[test]
fn ledger_text_round_trip_preserves_peak() {
    let mut r = rng(303);
    let dims = ProblemDims::new(2, 20, 2, 4).unwrap();
    let p = AttentionProblem::random(AttentionVariant::MsaColumnWise, dims, NumericFormat::Bf16e, &mut r).unwrap();
    let mut ledger = AllocationLedger::new();
    attn_forward_tiled(&p, &TileConfig::new(8, 8, 1).unwrap(), &mut ledger).unwrap();
    let back = AllocationLedger::from_text(&ledger.to_text()).unwrap();
    assert_eq!(measure_peak(&back).unwrap(), measure_peak(&ledger).unwrap());
}
