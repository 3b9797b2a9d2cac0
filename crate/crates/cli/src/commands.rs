use memlab::attention::*;
use memlab::gradcheck::{check_gradients, input_name, Backend};
use memlab::memory::{measure_peak, AllocationLedger};
use memlab::plan::{max_seq, memory_breakdown, HardwareConfig, Layout, ModelConfig, ParallelConfig, SEARCH_CAP};
use memlab::precision::bias_accumulation_error;
use memlab::{Error, NumericFormat, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{default_tolerance, Case, GradcheckSection, PlanSection, PrecisionSection, RunConfig};
use crate::report::{Cell, Table};

pub const BENCH_HEADER: &[&str] = &[
    "variant",
    "B",
    "L",
    "H",
    "D",
    "tile_q",
    "tile_k",
    "naive_peak_bytes",
    "tiled_peak_bytes",
    "reduction_ratio",
    "max_abs_diff",
];
pub const GRADCHECK_HEADER: &[&str] = &["variant", "tensor", "max_rel_err", "pass"];
pub const PRECISION_HEADER: &[&str] = &["B", "policy", "rel_err"];
pub const PLAN_HEADER: &[&str] = &["num_gpus", "framework_profile", "max_seq", "limiting_term"];
pub const BREAKDOWN_HEADER: &[&str] = &[
    "num_gpus",
    "framework_profile",
    "seq_len",
    "model_state_bytes",
    "model_state_host_bytes",
    "activation_bytes",
    "mask_device_bytes",
    "mask_host_bytes",
    "posemb_bytes",
    "attn_map_bytes",
    "device_total_bytes",
    "usable_bytes",
    "fits",
];

/// A finished report plus the rows that failed a correctness check.
pub struct Outcome {
    pub table: Table,
    pub failures: Vec<String>,
}

/// Per-job RNG: one ChaCha8 stream per job index, so rows do not depend on
/// execution order.
fn job_rng(seed: u64, job: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(job as u64);
    rng
}

fn run_jobs<J: Sync, R: Send>(jobs: &[J], parallel: bool, f: impl Fn(usize, &J) -> R + Sync) -> Vec<R> {
    if parallel {
        jobs.par_iter().enumerate().map(|(i, j)| f(i, j)).collect()
    } else {
        jobs.iter().enumerate().map(|(i, j)| f(i, j)).collect()
    }
}

struct BenchJob {
    variant: AttentionVariant,
    format: NumericFormat,
    case: Case,
    tiles: TileConfig,
    tolerance: f64,
}

fn bench_row(job: &BenchJob, rng: &mut ChaCha8Rng) -> memlab::Result<(Vec<Cell>, Option<String>)> {
    let Case {
        batch,
        len,
        heads,
        head_dim,
    } = job.case;
    let dims = ProblemDims::new(batch, len, heads, head_dim)?;
    let p = AttentionProblem::random(job.variant, dims, job.format, rng)?;
    let d_out = Tensor::random(&dims.qkv_shape(), job.format, rng)?;

    let mut naive = AllocationLedger::new();
    let fwd = attn_forward_ref_logged(&p, &mut naive)?;
    attn_backward_ref_logged(&p, &fwd.probs, &d_out, &mut naive)?;

    let mut tiled = AllocationLedger::new();
    let (o, stats) = attn_forward_tiled(&p, &job.tiles, &mut tiled)?;
    attn_backward_tiled(&p, &o, &stats, &d_out, &job.tiles, &AccumPolicy::default(), &mut tiled)?;

    let naive_peak = measure_peak(&naive)?.peak_bytes;
    let tiled_peak = measure_peak(&tiled)?.peak_bytes;
    let diff = o.max_abs_diff(&fwd.output)?;
    let mut failure = None;
    if diff.is_nan() || diff > job.tolerance {
        failure = Some(format!(
            "{} {:?}: max_abs_diff {diff:.5e} > {:.5e}",
            job.variant, job.case, job.tolerance
        ));
    }
    Ok((
        vec![
            job.variant.name().into(),
            Cell::Int(batch as u64),
            Cell::Int(len as u64),
            Cell::Int(heads as u64),
            Cell::Int(head_dim as u64),
            Cell::Int(job.tiles.tile_q as u64),
            Cell::Int(job.tiles.tile_k as u64),
            Cell::Int(naive_peak),
            Cell::Int(tiled_peak),
            Cell::Fixed(naive_peak as f64 / tiled_peak as f64),
            Cell::Sci(diff),
        ],
        failure,
    ))
}

fn check_naive_size(case: &Case, format: NumericFormat, limit: u64, key: &str) -> memlab::Result<()> {
    let bytes = 3 * (case.heads * case.batch * case.len * case.len) as u64 * format.bytes();
    if bytes > limit {
        return Err(Error::Validation(format!(
            "{key}: case {case:?} needs {bytes} naive bytes, above {key}.max_naive_bytes = {limit}"
        )));
    }
    Ok(())
}

fn bench_jobs(jobs: Vec<BenchJob>, seed: u64, parallel: bool) -> memlab::Result<Outcome> {
    let rows = run_jobs(&jobs, parallel, |i, job| bench_row(job, &mut job_rng(seed, i)));
    let mut table = Table::new(BENCH_HEADER);
    let mut failures = Vec::new();
    for row in rows {
        let (cells, failure) = row?;
        table.push(cells);
        failures.extend(failure);
    }
    Ok(Outcome { table, failures })
}

pub fn attn_bench(cfg: &RunConfig, seed: u64, parallel: bool) -> memlab::Result<Outcome> {
    let s = &cfg.attn_bench;
    let tiles = TileConfig::new(s.tile_q, s.tile_k, s.tile_b)?;
    let tolerance = s.tolerance.unwrap_or_else(|| default_tolerance(s.format));
    let mut jobs = Vec::new();
    for case in &s.cases {
        check_naive_size(case, s.format, s.max_naive_bytes, "attn_bench")?;
        for &variant in &s.variants {
            jobs.push(BenchJob {
                variant,
                format: s.format,
                case: *case,
                tiles,
                tolerance,
            });
        }
    }
    bench_jobs(jobs, seed, parallel)
}

pub fn sweep(cfg: &RunConfig, seed: u64, parallel: bool) -> memlab::Result<Outcome> {
    let s = &cfg.sweep;
    let tolerance = s.tolerance.unwrap_or_else(|| default_tolerance(s.format));
    let mut jobs = Vec::new();
    for &len in &s.lens {
        let case = Case {
            batch: s.batch,
            len,
            heads: s.heads,
            head_dim: s.head_dim,
        };
        check_naive_size(&case, s.format, s.max_naive_bytes, "sweep")?;
        for &[tq, tk, tb] in &s.tiles {
            jobs.push(BenchJob {
                variant: s.variant,
                format: s.format,
                case,
                tiles: TileConfig::new(tq, tk, tb)?,
                tolerance,
            });
        }
    }
    bench_jobs(jobs, seed, parallel)
}

pub fn gradcheck(cfg: &RunConfig, seed: u64, parallel: bool) -> memlab::Result<Outcome> {
    let s: &GradcheckSection = &cfg.gradcheck;
    let dims = ProblemDims::new(s.batch, s.len, s.heads, s.head_dim)?;
    if s.step.is_nan() || s.step <= 0.0 {
        return Err(Error::Validation("gradcheck.step must be positive".into()));
    }
    let tiles = TileConfig::new(s.tile_q, s.tile_k, 1)?;
    let results = run_jobs(&s.variants, parallel, |i, &variant| {
        let mut rng = job_rng(seed, i);
        let p = AttentionProblem::random(variant, dims, NumericFormat::F64, &mut rng)?;
        let d_out = Tensor::random(&dims.qkv_shape(), NumericFormat::F64, &mut rng)?;
        let mut rows = Vec::new();
        for backend in [Backend::Reference, Backend::Tiled(tiles)] {
            for c in check_gradients(&backend, &p, &d_out, s.step)? {
                rows.push((
                    variant,
                    format!("{}:{}", backend.name(), input_name(c.input)),
                    c.max_rel_err,
                ));
            }
        }
        Ok::<_, Error>(rows)
    });
    let mut table = Table::new(GRADCHECK_HEADER);
    let mut failures = Vec::new();
    for rows in results {
        for (variant, tensor, err) in rows? {
            let pass = err <= s.tolerance;
            if !pass {
                failures.push(format!(
                    "{variant} {tensor}: max_rel_err {err:.5e} > {:.5e}",
                    s.tolerance
                ));
            }
            table.push(vec![
                variant.name().into(),
                Cell::Text(tensor),
                Cell::Sci(err),
                Cell::Bool(pass),
            ]);
        }
    }
    Ok(Outcome { table, failures })
}

pub fn precision_demo(cfg: &RunConfig, seed: u64, parallel: bool) -> memlab::Result<Outcome> {
    let s: &PrecisionSection = &cfg.precision_demo;
    let mut jobs = Vec::new();
    for &b in &s.batches {
        for mode in [AccumMode::NativeFormat, AccumMode::UpcastF32] {
            jobs.push((b, mode));
        }
    }
    let errs = run_jobs(&jobs, parallel, |i, &(b, mode)| {
        bias_accumulation_error(b, s.heads, s.len, s.format, mode, &mut job_rng(seed, i))
    });
    let mut table = Table::new(PRECISION_HEADER);
    let mut failures = Vec::new();
    for (&(b, mode), err) in jobs.iter().zip(errs) {
        let err = err?;
        let policy = match mode {
            AccumMode::NativeFormat => format!("native_{}", s.format),
            AccumMode::UpcastF32 => format!("upcast_{}", s.format.at_least_f32()),
        };
        if mode == AccumMode::UpcastF32 && (err.is_nan() || err > s.upcast_tolerance) {
            failures.push(format!(
                "B={b} {policy}: rel_err {err:.5e} > {:.5e}",
                s.upcast_tolerance
            ));
        }
        table.push(vec![Cell::Int(b as u64), Cell::Text(policy), Cell::Sci(err)]);
    }
    Ok(Outcome { table, failures })
}

fn framework(name: &str, layout: Layout, batch: u64) -> memlab::Result<ParallelConfig> {
    let pc = match name {
        "baseline" => ParallelConfig::all_off(layout),
        "optimized" => ParallelConfig::all_on(layout),
        other => {
            return Err(Error::Validation(format!(
                "plan.frameworks: unknown profile `{other}` (expected baseline or optimized)"
            )))
        }
    };
    Ok(ParallelConfig { batch, ..pc })
}

struct PlanJob {
    num_gpus: u64,
    framework: String,
    model: ModelConfig,
    parallel: ParallelConfig,
    hardware: HardwareConfig,
}

fn plan_jobs(s: &PlanSection) -> memlab::Result<Vec<PlanJob>> {
    let model = s.model.resolve()?;
    if s.score_bytes == 0 {
        return Err(Error::Validation("plan.score_bytes must be positive".into()));
    }
    let mut jobs = Vec::new();
    for &n in &s.num_gpus {
        let layout = Layout::for_devices(n, s.tp_max, s.pp_max)?;
        let hardware = s.hardware.resolve(n)?;
        for name in &s.frameworks {
            jobs.push(PlanJob {
                num_gpus: n,
                framework: name.clone(),
                model: model.clone(),
                parallel: framework(name, layout, s.batch)?,
                hardware,
            });
        }
    }
    Ok(jobs)
}

pub fn plan_max_seq(cfg: &RunConfig, parallel: bool) -> memlab::Result<Outcome> {
    let s = &cfg.plan;
    let jobs = plan_jobs(s)?;
    let results = run_jobs(&jobs, parallel, |_, j| {
        let r = max_seq(&j.model, &j.parallel, &j.hardware, s.score_bytes)?;
        let mut failure = None;
        let fits_at_max = r.breakdown_at_max.is_none_or(|b| b.fits);
        let beyond_fits = r.max_seq < SEARCH_CAP
            && memory_breakdown(&j.model, &j.parallel, &j.hardware, r.max_seq + 1, s.score_bytes)?.fits;
        if !fits_at_max || beyond_fits {
            failure = Some(format!(
                "{} gpus {}: max_seq {} is not the fitting boundary",
                j.num_gpus, j.framework, r.max_seq
            ));
        }
        Ok::<_, Error>((r, failure))
    });
    let mut table = Table::new(PLAN_HEADER);
    let mut failures = Vec::new();
    for (j, res) in jobs.iter().zip(results) {
        let (r, failure) = res?;
        failures.extend(failure);
        table.push(vec![
            Cell::Int(j.num_gpus),
            Cell::Text(j.framework.clone()),
            Cell::Int(r.max_seq),
            r.limiting_term.label().into(),
        ]);
    }
    Ok(Outcome { table, failures })
}

pub fn plan_breakdown(cfg: &RunConfig) -> memlab::Result<Outcome> {
    let s = &cfg.plan;
    let mut table = Table::new(BREAKDOWN_HEADER);
    for j in plan_jobs(s)? {
        for &seq in &s.seq_lens {
            let b = memory_breakdown(&j.model, &j.parallel, &j.hardware, seq, s.score_bytes)?;
            table.push(vec![
                Cell::Int(j.num_gpus),
                Cell::Text(j.framework.clone()),
                Cell::Int(seq),
                Cell::Int(b.model_state_bytes),
                Cell::Int(b.model_state_host_bytes),
                Cell::Int(b.activation_bytes),
                Cell::Int(b.mask_device_bytes),
                Cell::Int(b.mask_host_bytes),
                Cell::Int(b.posemb_bytes),
                Cell::Int(b.attn_map_bytes),
                Cell::Int(b.device_total()),
                Cell::Int(b.usable_bytes),
                Cell::Bool(b.fits),
            ]);
        }
    }
    Ok(Outcome {
        table,
        failures: Vec::new(),
    })
}
