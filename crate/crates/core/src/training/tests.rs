use super::*;
use crate::data::{Task, TaskKind};
use crate::model::ModelConfig;
use proptest::prelude::*;

fn scalar(v: f64) -> Vec<Tensor<f64>> {
    vec![Tensor::new(&[1], vec![v]).unwrap()]
}

#[test]
fn first_step_moves_by_learning_rate() {
    let mut p = scalar(1.0);
    let mut s = AdamState::new(&p, 0.1);
    adam_step(&mut p, &scalar(2.0), &mut s).unwrap();
    let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    assert!((p[0].values()[0] - want).abs() < 1e-15);
    assert_eq!(s.step_count(), 1);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p = vec![Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap()];
    let before = p.clone();
    let mut s = AdamState::new(&p, 0.1);
    for _ in 0..5 {
        adam_step(&mut p, &[Tensor::zeros(&[2, 2])], &mut s).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn quadratic_converges_like_a_hand_rolled_adam() {
    let mut p = scalar(1.0);
    let mut s = AdamState::new(&p, 0.1);
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * p[0].values()[0];
        adam_step(&mut p, &scalar(g), &mut s).unwrap();

        let g = 2.0 * theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        theta -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0].values()[0] - theta).abs() < 1e-12, "step {t}");
    }
    assert!(theta.abs() < 0.05, "{theta}");
}

#[test]
fn non_finite_gradient_aborts_the_step() {
    let mut p = vec![Tensor::new(&[2], vec![1.0, 2.0]).unwrap()];
    let mut s = AdamState::new(&p, 0.1);
    adam_step(&mut p, &[Tensor::new(&[2], vec![0.3, -0.2]).unwrap()], &mut s).unwrap();
    let (p0, s0) = (p.clone(), s.clone());
    let err = adam_step(&mut p, &[Tensor::new(&[2], vec![f64::NAN, 1.0]).unwrap()], &mut s).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert_eq!(p, p0);
    assert_eq!(s, s0);
    let err = adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn clipping_contract() {
    let g = vec![Tensor::new(&[2], vec![1.2, -1.6]).unwrap()];
    let mut same = g.clone();
    assert_eq!(clip_or_flag(&mut same, None).unwrap(), 2.0);
    assert_eq!(same, g);
    let mut halved = g.clone();
    clip_or_flag(&mut halved, Some(1.0)).unwrap();
    assert_eq!(halved[0].values(), &[0.6, -0.8]);
    let mut nan = vec![Tensor::new(&[1], vec![f64::NAN]).unwrap()];
    assert!(matches!(clip_or_flag(&mut nan, None), Err(Error::NonFinite(_))));
    let mut inf = vec![Tensor::new(&[1], vec![f64::INFINITY]).unwrap()];
    assert!(clip_or_flag(&mut inf, Some(1.0)).is_err());
}

#[test]
fn patience_rule_trace() {
    let mut p = Plateau::new(2);
    let got: Vec<Verdict> = [10.0, 9.0, 9.5, 9.4].iter().map(|&x| p.observe(x)).collect();
    assert_eq!(got, vec![Verdict::Improved, Verdict::Improved, Verdict::Stale, Verdict::Exhausted]);
    assert_eq!(p.best(), 9.0);
}

#[test]
fn config_rules() {
    TrainConfig::default().validate().unwrap();
    let bad = [
        TrainConfig { lr_stage2: 3e-4, ..Default::default() },
        TrainConfig { patience: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { val_interval: Some(0), ..Default::default() },
        TrainConfig { clip: Some(0.0), ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn optimizer_state_round_trips() {
    let p = vec![Tensor::new(&[2, 3], vec![0.1f32; 6]).unwrap(), Tensor::new(&[4], vec![1.0f32; 4]).unwrap()];
    let mut s = AdamState::new(&p, 3e-4);
    let mut q = p.clone();
    let g: Vec<Tensor<f32>> = p.iter().map(|t| Tensor::full(t.shape(), 0.7)).collect();
    adam_step(&mut q, &g, &mut s).unwrap();
    let back = AdamState::<f32>::from_bytes(&s.to_bytes()).unwrap();
    assert_eq!(back, s);
    assert!(AdamState::<f64>::from_bytes(&s.to_bytes()).is_err());
    let mut bad = s.to_bytes();
    bad[12] ^= 4;
    assert!(AdamState::<f32>::from_bytes(&bad).is_err());
}

fn copy_setup(n_train: usize, seed: u64) -> (Batcher, Vec<Batch>, ModelConfig) {
    let task = Task::new(TaskKind::Copy, 10, 1, 5, seed).unwrap();
    let vocab = task.vocabulary();
    let train = Batcher::new(&task.sample(n_train, seed + 1), &vocab, &vocab, 16, 50, seed).unwrap();
    let valid = Batcher::new(&task.sample(32, seed + 2), &vocab, &vocab, 16, 50, seed).unwrap().sequential();
    let cfg = ModelConfig { d: 16, n_layers: 1, seed, ..ModelConfig::new(10, 10) };
    (train, valid, cfg)
}

#[test]
fn resuming_from_saved_state_is_bitwise_identical() {
    let (train, _, cfg) = copy_setup(64, 1);
    let batches = train.epoch(0);
    let mut straight: Model<f32> = Model::new(cfg.clone()).unwrap();
    let mut adam = AdamState::new(straight.params().tensors(), 3e-4);
    for (i, b) in batches.iter().enumerate() {
        train_step(&mut straight, b, &mut adam, i as u64, None).unwrap();
    }

    let mut first: Model<f32> = Model::new(cfg).unwrap();
    let mut adam1 = AdamState::new(first.params().tensors(), 3e-4);
    let half = batches.len() / 2;
    for (i, b) in batches[..half].iter().enumerate() {
        train_step(&mut first, b, &mut adam1, i as u64, None).unwrap();
    }
    let mut resumed: Model<f32> = crate::checkpoint::from_bytes(&crate::checkpoint::to_bytes(&first)).unwrap();
    let mut adam2 = AdamState::from_bytes(&adam1.to_bytes()).unwrap();
    for (i, b) in batches.iter().enumerate().skip(half) {
        train_step(&mut resumed, b, &mut adam2, i as u64, None).unwrap();
    }
    assert_eq!(straight.params().tensors(), resumed.params().tensors());
    assert_eq!(adam, adam2);
}

#[test]
fn two_stage_run_logs_and_is_reproducible() {
    let (train, valid, cfg) = copy_setup(96, 2);
    let tc = TrainConfig {
        batch_size: 16,
        patience: 1,
        max_steps: 60,
        lr_stage1: 3e-3,
        lr_stage2: 1.5e-3,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut log = Vec::new();
        let out = train_loop(Model::<f32>::new(cfg.clone()).unwrap(), &train, &valid, &tc, &mut log).unwrap();
        (out, String::from_utf8(log).unwrap())
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(strip_timing(&log_a), strip_timing(&log_b));
    assert_eq!(a.best.params().tensors(), b.best.params().tensors());
    assert!(a.steps <= 60);

    let untrained = perplexity(&Model::<f32>::new(cfg).unwrap(), &valid).unwrap();
    assert!(a.best_ppl < untrained, "{} vs {untrained}", a.best_ppl);
    assert_eq!(perplexity(&a.best, &valid).unwrap(), a.best_ppl);

    let mut best_so_far = f64::INFINITY;
    let mut max_stage1_lr = 0.0f64;
    for line in log_a.lines().filter(|l| l.starts_with("step=")) {
        let kv: std::collections::HashMap<&str, &str> = line.split(' ').filter_map(|s| s.split_once('=')).collect();
        let keys: Vec<&str> = line.split(' ').map(|s| s.split_once('=').unwrap().0).collect();
        assert_eq!(keys, ["step", "loss", "ppl", "lr", "tok_per_s", "stage"]);
        let ppl: f64 = kv["ppl"].parse().unwrap();
        let lr: f64 = kv["lr"].parse().unwrap();
        best_so_far = best_so_far.min(ppl);
        match kv["stage"] {
            "1" => max_stage1_lr = max_stage1_lr.max(lr),
            "2" => assert!(lr < max_stage1_lr),
            s => panic!("stage {s}"),
        }
    }
    assert!((best_so_far - a.best_ppl).abs() < 1e-5);
}

#[test]
fn exploding_updates_fail_to_converge() {
    let (train, valid, cfg) = copy_setup(64, 3);
    let tc = TrainConfig {
        batch_size: 16,
        lr_stage1: 3e38,
        lr_stage2: 1e38,
        ..Default::default()
    };
    let mut log = Vec::new();
    let out = train_loop(Model::<f32>::new(cfg).unwrap(), &train, &valid, &tc, &mut log).unwrap();
    let log = String::from_utf8(log).unwrap();
    assert_eq!(out.status, Status::FailedToConverge);
    assert_eq!(out.status.as_str(), "failed to converge");
    assert_eq!(log.lines().filter(|l| l.starts_with("event=diverged")).count(), DIVERGENCE_LIMIT);
}

#[test]
fn single_stage_never_restarts() {
    let (train, valid, cfg) = copy_setup(64, 4);
    let tc = TrainConfig { batch_size: 16, patience: 1, single_stage: true, max_steps: 200, ..Default::default() };
    let mut log = Vec::new();
    let out = train_loop(Model::<f32>::new(cfg).unwrap(), &train, &valid, &tc, &mut log).unwrap();
    let log = String::from_utf8(log).unwrap();
    assert!(!log.contains("stage=2"));
    assert!(!log.contains("event=restart"));
    assert_ne!(out.status, Status::FailedToConverge);
}

#[test]
fn empty_validation_is_rejected() {
    let (train, _, cfg) = copy_setup(16, 5);
    let err = train_loop(Model::<f32>::new(cfg).unwrap(), &train, &[], &TrainConfig::default(), &mut Vec::new());
    assert!(matches!(err, Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn reported_best_never_increases(ppls in proptest::collection::vec(1.0f64..50.0, 1..40), patience in 1usize..4) {
        let mut p = Plateau::new(patience);
        let mut prev = f64::INFINITY;
        for x in ppls {
            p.observe(x);
            prop_assert!(p.best() <= prev);
            prev = p.best();
        }
    }
}
