use memlab::plan::*;

type Flip = (&'static str, fn(&mut ParallelConfig));

fn genslm(n: u64, all_on: bool) -> (ModelConfig, ParallelConfig, HardwareConfig) {
    let layout = Layout::for_devices(n, 8, 4).unwrap();
    let pc = if all_on {
        ParallelConfig::all_on(layout)
    } else {
        ParallelConfig::all_off(layout)
    };
    (ModelConfig::genslm_25b(), pc, HardwareConfig::a100_40g(n))
}

#[test]
fn all_optimisations_extend_sequence_length_tenfold() {
    let (mc, off, hw) = genslm(64, false);
    let (_, on, _) = genslm(64, true);
    let a = max_seq(&mc, &off, &hw, 2).unwrap();
    let b = max_seq(&mc, &on, &hw, 2).unwrap();
    assert!(a.max_seq > 0);
    assert!(
        b.max_seq as f64 / a.max_seq as f64 >= 10.0,
        "{} / {}",
        b.max_seq,
        a.max_seq
    );
}

#[test]
fn every_flag_is_monotone() {
    let flips: [Flip; 6] = [
        ("flash_attention", |p| p.flash_attention = true),
        ("sp_enabled", |p| p.sp_enabled = true),
        ("posemb_partitioned", |p| {
            p.sp_enabled = true;
            p.posemb_partitioned = true
        }),
        ("mask_staging", |p| p.mask_staging = true),
        ("zero_stage", |p| p.zero_stage += 1),
        ("offload", |p| p.offload = true),
    ];
    for model in [ModelConfig::genslm_25b(), ModelConfig::genslm_33b()] {
        for n in [8u64, 16, 64] {
            let layout = Layout::for_devices(n, 8, 4).unwrap();
            let hw = HardwareConfig::a100_40g(n);
            for stage in 0..3u8 {
                for sp in [false, true] {
                    let base = ParallelConfig {
                        zero_stage: stage,
                        sp_enabled: sp,
                        ..ParallelConfig::all_off(layout)
                    };
                    let before = max_seq(&model, &base, &hw, 2).unwrap().max_seq;
                    for (name, flip) in &flips {
                        let mut pc = base;
                        flip(&mut pc);
                        let after = max_seq(&model, &pc, &hw, 2).unwrap().max_seq;
                        assert!(after >= before, "{} n={n} {name}: {before} -> {after}", model.name);
                    }
                }
            }
        }
    }
}

#[test]
fn search_matches_linear_scan_on_toy_configs() {
    for i in 0..20u64 {
        let mc = ModelConfig {
            name: format!("toy{i}"),
            params: 10 + 5 * i,
            n_layer: 1 + i % 3,
            hidden: 4 + i,
            n_head: 1 + i % 4,
            act_multiplier: 1.0 + i as f64 / 7.0,
            position_embedding: if i % 2 == 0 {
                PositionEncoding::Learned
            } else {
                PositionEncoding::Rotary
            },
            custom_mask: i % 3 == 0,
            mask_bytes: 4,
            posemb_bytes: 4,
            posemb_copies: 3,
        };
        let pc = ParallelConfig {
            tp: 1 + i % 2,
            flash_attention: i % 4 == 1,
            mask_staging: i % 5 == 0,
            ..ParallelConfig::default()
        };
        let hw = HardwareConfig {
            gpu_mem_bytes: 20_000 + 3_000 * i,
            num_gpus: pc.total_devices(),
            mask_threshold: 20 + i,
            reserve_frac: 0.05,
        };
        let r = max_seq(&mc, &pc, &hw, 2).unwrap();
        let scan = (1..=10_000u64)
            .take_while(|&s| memory_breakdown(&mc, &pc, &hw, s, 2).unwrap().fits)
            .last()
            .unwrap_or(0);
        assert!(scan < 10_000, "toy {i}: scan hit the cap");
        assert_eq!(r.max_seq, scan, "toy {i}");
    }
}

#[test]
fn terms_are_non_decreasing_in_length() {
    let (mc, pc, hw) = genslm(64, false);
    let mut prev = memory_breakdown(&mc, &pc, &hw, 1, 2).unwrap();
    for s in (1..200_000u64).step_by(997) {
        let b = memory_breakdown(&mc, &pc, &hw, s, 2).unwrap();
        for ((_, x), (_, y)) in prev.device_terms().iter().zip(b.device_terms().iter()) {
            assert!(y >= x);
        }
        prev = b;
    }
}

#[test]
fn config_file_drives_the_planner() {
    let dir = std::env::temp_dir().join(format!("memlab-plan-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("plan.toml");
    std::fs::write(
        &path,
        "[model]\nprofile = \"genslm-33b\"\n[parallel]\ntp = 8\npp = 4\nflash_attention = true\n[hardware]\nprofile = \"a100-40g\"\n",
    )
    .unwrap();
    let cfg = PlanConfig::from_toml_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let r = max_seq(&cfg.model, &cfg.parallel, &cfg.hardware, cfg.score_bytes).unwrap();
    assert!(r.breakdown_at_max.unwrap().fits);
    std::fs::remove_dir_all(dir).unwrap();
}
