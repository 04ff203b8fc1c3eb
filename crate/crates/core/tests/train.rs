use s3pet::backbone::{Backbone, BackboneConfig};
use s3pet::pet::{Gates, SearchSpace, Supernet};
use s3pet::task::{SyntheticTask, TaskSpec};
use s3pet::train::{evaluate, ratio_bp, retrain, TrainConfig};

fn setup() -> (Backbone, s3pet::task::DataSplit) {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let split = SyntheticTask::new(TaskSpec {
        train_size: 64,
        val_size: 32,
        test_size: 32,
        ..TaskSpec::default()
    })
    .unwrap()
    .generate()
    .unwrap();
    (bb, split)
}

fn quick() -> TrainConfig {
    TrainConfig {
        steps: 5,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn empty_structure_scores_like_the_frozen_backbone() {
    let (bb, split) = setup();
    let mix = SearchSpace::mix(bb.config(), 1).unwrap();
    let out = retrain(&bb, mix.subset(&[]), &split, &quick(), 0).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(out.metrics.params, 0);
    // any delta with all gates closed is the frozen model
    let net = Supernet::new(mix);
    let delta = vec![0.3; net.num_params()];
    let closed = vec![0.0; net.len()];
    assert_eq!(out.metrics.val, evaluate(&bb, &net, &delta, &closed, &split.val).unwrap());
    assert_eq!(out.metrics.test, evaluate(&bb, &net, &delta, &closed, &split.test).unwrap());
}

#[test]
fn retraining_is_deterministic() {
    let (bb, split) = setup();
    let space = SearchSpace::mix(bb.config(), 1).unwrap().subset(&[0, 5, 40, 90]);
    let a = retrain(&bb, space.clone(), &split, &quick(), 3).unwrap();
    let b = retrain(&bb, space.clone(), &split, &quick(), 3).unwrap();
    assert_eq!(a.delta, b.delta);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.metrics, b.metrics);
    let c = retrain(&bb, space, &split, &quick(), 4).unwrap();
    assert_ne!(a.delta, c.delta);
}

#[test]
fn training_lowers_the_loss() {
    let (bb, split) = setup();
    let space = SearchSpace::lora(bb.config(), 1).unwrap();
    let cfg = TrainConfig {
        steps: 40,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = retrain(&bb, space, &split, &cfg, 0).unwrap();
    let head: f64 = out.losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = out.losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn ratio_is_in_basis_points() {
    assert_eq!(ratio_bp(1000, 100_000), 100.0);
    assert_eq!(ratio_bp(0, 46_720), 0.0);
}

#[test]
fn hard_gates_of_one_match_soft_gates_of_one() {
    let (bb, split) = setup();
    let net = Supernet::new(SearchSpace::mix(bb.config(), 1).unwrap());
    let delta: Vec<f64> = (0..net.num_params()).map(|i| ((i % 7) as f64 - 3.0) * 0.01).collect();
    let ones = vec![1.0; net.len()];
    let hard = evaluate(&bb, &net, &delta, &ones, &split.val).unwrap();
    let batch = split.val.batch(&(0..split.val.len()).collect::<Vec<_>>()).unwrap();
    let mut tape = s3pet::autodiff::Tape::new();
    let z = tape.constant(vec![net.len()], ones.clone()).unwrap();
    let mut hook = net.hook(&tape, &delta, Gates::Soft(z), false).unwrap();
    let logits = bb.forward(&mut tape, &batch, &mut hook).unwrap();
    let v = tape.shape(logits)[1];
    let correct = tape
        .value(logits)
        .chunks(v)
        .zip(&batch.targets)
        .filter(|(row, &t)| row.iter().enumerate().all(|(i, &x)| i == t || x < row[t]))
        .count();
    assert_eq!(hard, correct as f64 / split.val.len() as f64);
}
