use std::time::Instant;

use cubescore::augment::AugmentPolicy;
use cubescore::nn::{read_checkpoint, Architecture, OptimizerKind, Tensor4};
use cubescore::synth::{generate_dataset, DatasetConfig, LabeledDrawing};
use cubescore::train::{evaluate, split, train, LabelSource, Split, SplitSpec, TrainConfig, TrainError};

fn data(n: usize, input_size: usize, seed: u64) -> Vec<LabeledDrawing> {
    generate_dataset(&DatasetConfig { n, input_size, seed, ..Default::default() }).unwrap()
}

fn small_config(input_size: usize) -> TrainConfig {
    TrainConfig {
        arch: Architecture::BaselineMini,
        input_size,
        epochs: 2,
        batch_size: 16,
        augment: AugmentPolicy::transform_resize(),
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn baseline_memorizes_a_tiny_subset() {
    let d = data(32, 64, 3);
    let all = Split { train: (0..32).collect(), val: Vec::new() };
    let cfg = TrainConfig {
        arch: Architecture::BaselineMini,
        input_size: 64,
        epochs: 200,
        augment: AugmentPolicy::none(),
        seed: 1,
        ..Default::default()
    };
    let started = Instant::now();
    let run = train(&d, &all, &cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert!(run.result.train_accuracy >= 0.99, "train accuracy {}", run.result.train_accuracy);
    assert_eq!(run.result.train_loss.len(), 200);
    assert!(run.result.validation.is_none());
    assert!(secs < 120.0, "took {secs:.1}s");
}

#[test]
fn same_config_same_checkpoint() {
    let d = data(80, 32, 8);
    let gold: Vec<_> = d.iter().map(|x| x.gold).collect();
    let s = split(&gold, &SplitSpec { seed: 2, ..Default::default() }).unwrap();
    let cfg = small_config(32);
    let a = train(&d, &s, &cfg).unwrap();
    let b = train(&d, &s, &cfg).unwrap();
    assert_eq!(a.result.checkpoint_sha256, b.result.checkpoint_sha256);
    assert_eq!(a.checkpoint(), b.checkpoint());
    assert_eq!(serde_json::to_string(&a.result).unwrap(), serde_json::to_string(&b.result).unwrap());
    let c = train(&d, &s, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.result.checkpoint_sha256, c.result.checkpoint_sha256);
}

#[test]
fn run_result_is_consistent_with_its_checkpoint() {
    let d = data(80, 32, 9);
    let gold: Vec<_> = d.iter().map(|x| x.gold).collect();
    let s = split(&gold, &SplitSpec::default()).unwrap();
    let cfg = TrainConfig { label_source: LabelSource::Interviewer, ..small_config(32) };
    let run = train(&d, &s, &cfg).unwrap();
    let r = &run.result;
    assert_eq!(r.train_loss.len(), cfg.epochs);
    assert_eq!(r.val_accuracy_by_epoch.len(), cfg.epochs);
    let v = r.validation.as_ref().unwrap();
    assert!((0.0..=1.0).contains(&v.accuracy));
    assert_eq!(v.accuracy, *r.val_accuracy_by_epoch.last().unwrap());

    let (model, mcfg) = read_checkpoint(&run.checkpoint()).unwrap();
    assert_eq!(mcfg, cfg.model_config());
    let x = Tensor4::from_grays(s.val.iter().map(|&i| &d[i].tensor));
    let truth: Vec<_> = s.val.iter().map(|&i| d[i].gold).collect();
    let again = evaluate(&model, &x, &truth).unwrap();
    assert_eq!(&again, v);
}

#[test]
fn exploding_updates_are_reported() {
    let d = data(40, 32, 4);
    let all = Split { train: (0..40).collect(), val: Vec::new() };
    let cfg = TrainConfig { optimizer: OptimizerKind::sgd(1e12, 0.9), epochs: 5, ..small_config(32) };
    match train(&d, &all, &cfg) {
        Err(TrainError::DivergenceDetected { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|r| r.result.train_loss)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let d = data(20, 32, 4);
    let all = Split { train: (0..20).collect(), val: Vec::new() };
    for cfg in [
        TrainConfig { epochs: 0, ..small_config(32) },
        TrainConfig { batch_size: 0, ..small_config(32) },
        TrainConfig { input_size: 30, ..small_config(32) },
        TrainConfig { optimizer: OptimizerKind::adam(0.0), ..small_config(32) },
    ] {
        assert!(matches!(train(&d, &all, &cfg), Err(TrainError::InvalidConfig(_))));
    }
    let empty = Split { train: Vec::new(), val: Vec::new() };
    assert!(matches!(train(&d, &empty, &small_config(32)), Err(TrainError::EmptyDataset)));
}
