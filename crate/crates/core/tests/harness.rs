use iwin_core::block::build_variant;
use iwin_core::harness::{
    bench, resolution_transfer_check, train_toy, verify_all, verify_all_with, BenchOp, BenchSizes, RunReport,
    SyntheticTask, TrainConfig, RUN_REPORT_SCHEMA,
};
use iwin_core::interleave::{self, WindowLayout};
use iwin_core::{Result, Tensor};

fn assert_schema_valid(report: &RunReport) {
    let schema: serde_json::Value = serde_json::from_str(RUN_REPORT_SCHEMA).unwrap();
    let instance = serde_json::to_value(report).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn small_task() -> TrainConfig {
    TrainConfig {
        model: build_variant("tiny-test", 32).unwrap(),
        task: SyntheticTask {
            size: 32,
            samples_per_class: 2,
            ..Default::default()
        },
        steps: 4,
        ..Default::default()
    }
}

#[test]
fn verify_all_passes_with_every_suite() {
    let r = verify_all().unwrap();
    for c in &r.checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert!(r.passed);
    assert!(r.checks.len() >= 6);
    assert_schema_valid(&r);
}

/// Reads the rearranged map back with the rearrange formula instead of its
/// inverse.
fn corrupted_restore(x: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    interleave::rearrange(x, layout)
}

#[test]
fn corrupted_restore_fails_bijectivity() {
    let r = verify_all_with(0, corrupted_restore).unwrap();
    let check = r.checks.iter().find(|c| c.name == "interleave_bijectivity").unwrap();
    assert!(!check.passed, "{}", check.detail);
    assert!(!r.passed);
}

#[test]
fn training_is_deterministic() {
    let cfg = small_task();
    let a = train_toy(&cfg).unwrap();
    let b = train_toy(&cfg).unwrap();
    assert_eq!(a.report.without_timing(), b.report.without_timing());
    assert!(a.store.bit_eq(&b.store));
    assert_schema_valid(&a.report);
    let other = train_toy(&cfg.clone().with_seed(7)).unwrap();
    assert_ne!(other.losses, a.losses);
}

#[test]
fn zero_steps_echo_initial_loss_at_chance() {
    let cfg = TrainConfig {
        steps: 0,
        ..small_task()
    };
    let out = train_toy(&cfg).unwrap();
    assert_eq!(out.initial_loss, out.final_loss);
    assert!(out.losses.is_empty());
    // Untrained logits are close to uniform over four classes.
    assert!((out.initial_loss - 4f64.ln()).abs() < 1.0, "{}", out.initial_loss);
    assert!(out.accuracy <= 0.75);
}

#[test]
fn trainer_rejects_mismatched_or_oversized_configs() {
    let mut cfg = small_task();
    cfg.task.size = 64;
    assert!(train_toy(&cfg).is_err());
    let cfg = TrainConfig {
        model: build_variant("T", 224).unwrap(),
        task: SyntheticTask {
            size: 224,
            classes: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(train_toy(&cfg).is_err());
    let cfg = TrainConfig {
        lr: -1.0,
        ..small_task()
    };
    assert!(train_toy(&cfg).is_err());
}

#[test]
fn divergence_is_reported_with_its_step() {
    let cfg = TrainConfig {
        lr: 1e200,
        clip_norm: None,
        steps: 20,
        ..small_task()
    };
    let out = train_toy(&cfg).unwrap();
    let step = out.diverged_at.expect("a 1e200 step overflows");
    assert!(step < 20);
    let finite = out.report.checks.iter().find(|c| c.name == "finite_loss").unwrap();
    assert!(!finite.passed);
    assert!(finite.detail.contains(&step.to_string()));
    assert!(!out.report.passed);
}

#[test]
fn transfer_keeps_weights_and_rejects_absolute_positions() {
    let cfg = small_task();
    let trained = train_toy(&cfg).unwrap();
    let r = resolution_transfer_check(&trained, &cfg.task, 64).unwrap();
    let get = |name: &str| r.checks.iter().find(|c| c.name == name).unwrap().clone();
    assert!(get("executes_at_target").passed);
    assert!(get("parameters_unchanged").passed);
    let abs = get("absolute_position_rejected");
    assert!(abs.passed, "{}", abs.detail);
    assert_eq!(r.config["target_window"], 2);
    assert_schema_valid(&r);
    assert!(resolution_transfer_check(&trained, &cfg.task, 48).is_err());
}

#[test]
fn bench_reports_pass_schema_and_median_is_stable() {
    let sizes = BenchSizes {
        size: 16,
        channels: 8,
        window: 4,
        kernel: 3,
        heads: 2,
    };
    for op in BenchOp::ALL {
        let r = bench(op, &sizes, 5, 0).unwrap();
        assert!(r.passed, "{op}");
        assert_schema_valid(&r);
    }
    let one = bench(BenchOp::DepthwiseConv, &sizes, 1, 0).unwrap();
    let many = bench(BenchOp::DepthwiseConv, &sizes, 21, 0).unwrap();
    let t = &many.metrics["dwconv"];
    let (lo, hi) = (t["min_s"].as_f64().unwrap(), t["max_s"].as_f64().unwrap());
    let med = t["median_s"].as_f64().unwrap();
    assert!(lo <= med && med <= hi);
    // A single cold run may be slower, but not by orders of magnitude.
    assert!(one.metrics["dwconv"]["median_s"].as_f64().unwrap() < 100.0 * hi.max(1e-6));
}

#[test]
fn attention_bench_reports_theoretical_ratio() {
    let sizes = BenchSizes {
        size: 14,
        channels: 8,
        window: 7,
        kernel: 3,
        heads: 2,
    };
    let r = bench(BenchOp::Attention, &sizes, 1, 0).unwrap();
    assert_eq!(r.metrics["score_work_ratio"].as_f64().unwrap(), 49.0 / 196.0);
    let ratio = r.metrics["flop_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0);
}
