mod common;

use iwin_core::block::{build_variant, IwinModel, ModelConfig, PositionMode, Structure};
use iwin_core::harness::{upscale_nearest, SyntheticTask};
use iwin_core::{Error, ParamStore, Tape};

fn images(size: usize) -> iwin_core::Tensor {
    SyntheticTask {
        size,
        samples_per_class: 1,
        ..Default::default()
    }
    .generate()
    .unwrap()
    .images
}

#[test]
fn stage_shapes_follow_the_pyramid() {
    let cfg = build_variant("tiny-test", 64).unwrap();
    let mut store = ParamStore::new(0);
    let model = IwinModel::new(&mut store, &cfg).unwrap();
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let trace = model.forward_traced(&tape.leaf(images(64)), &cfg, &p).unwrap();
    assert_eq!(trace.logits.shape(), [4, 4]);
    let want: Vec<Vec<usize>> = vec![
        vec![4, 16, 16, 16],
        vec![4, 8, 8, 32],
        vec![4, 4, 4, 64],
        vec![4, 2, 2, 128],
    ];
    assert_eq!(trace.stage_shapes, want);
    assert!(trace.logits.value().all_finite());
}

#[test]
fn whole_model_gradients_pass_finite_differences() {
    for structure in [Structure::S1, Structure::S2, Structure::S3] {
        let cfg = ModelConfig {
            structure,
            ..build_variant("tiny-test", 32).unwrap()
        };
        let mut store = ParamStore::new(3);
        let model = IwinModel::new(&mut store, &cfg).unwrap();
        let x = images(32);
        let labels = [0, 1, 2, 3];
        let worst = common::param_gradcheck(&store, 3, 1e-5, |tape, p| {
            model
                .forward(&tape.leaf(x.clone()), &cfg, p)
                .unwrap()
                .cross_entropy(&labels)
                .unwrap()
        });
        assert!(worst < 1e-4, "{structure:?}: {worst}");
    }
}

#[test]
fn same_weights_run_at_a_larger_resolution() {
    let cfg = build_variant("tiny-test", 64).unwrap();
    let mut store = ParamStore::new(1);
    let model = IwinModel::new(&mut store, &cfg).unwrap();
    let snapshot = store.clone();
    let big = cfg.at_resolution(128).unwrap();
    assert_eq!(big.window, 4);
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let x = upscale_nearest(&images(64), 2).unwrap();
    let trace = model.forward_traced(&tape.leaf(x), &big, &p).unwrap();
    assert_eq!(trace.stage_shapes[0], [4, 32, 32, 16]);
    assert!(store.bit_eq(&snapshot));
}

#[test]
fn absolute_table_cannot_follow_a_resolution_change() {
    let cfg = ModelConfig {
        position: PositionMode::Absolute,
        ..build_variant("tiny-test", 64).unwrap()
    };
    let mut store = ParamStore::new(2);
    let model = IwinModel::new(&mut store, &cfg).unwrap();
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    assert!(model.forward(&tape.leaf(images(64)), &cfg, &p).is_ok());
    let big = cfg.at_resolution(128).unwrap();
    let x = upscale_nearest(&images(64), 2).unwrap();
    match model.forward(&tape.leaf(x), &big, &p) {
        Err(Error::Config(msg)) => assert!(msg.contains("absolute position table"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn relative_bias_is_tied_to_the_window() {
    let cfg = ModelConfig {
        position: PositionMode::Relative,
        ..build_variant("tiny-test", 64).unwrap()
    };
    let mut store = ParamStore::new(4);
    let model = IwinModel::new(&mut store, &cfg).unwrap();
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    assert!(model.forward(&tape.leaf(images(64)), &cfg, &p).is_ok());
    let big = cfg.at_resolution(128).unwrap();
    let x = upscale_nearest(&images(64), 2).unwrap();
    let err = model.forward(&tape.leaf(x), &big, &p).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn indivisible_resolution_names_the_stage() {
    let cfg = build_variant("tiny-test", 64).unwrap();
    let mut store = ParamStore::new(0);
    let model = IwinModel::new(&mut store, &cfg).unwrap();
    let run = ModelConfig {
        resolution: 96,
        window: 2,
        ..cfg.clone()
    };
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let x = SyntheticTask {
        size: 96,
        samples_per_class: 1,
        ..Default::default()
    }
    .generate()
    .unwrap()
    .images;
    let err = model.forward(&tape.leaf(x), &run, &p).unwrap_err().to_string();
    assert!(err.contains("stage"), "{err}");
}

#[test]
fn architecture_mismatch_is_rejected() {
    let cfg = build_variant("tiny-test", 64).unwrap();
    let mut store = ParamStore::new(0);
    let model = IwinModel::new(&mut store, &cfg).unwrap();
    let other = ModelConfig {
        embed_dim: 32,
        ..cfg.clone()
    };
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    assert!(model.forward(&tape.leaf(images(64)), &other, &p).is_err());
}
