mod common;

use pathcast::eval::{evaluate, DEFAULT_KS};
use pathcast::model::LossWeights;
use pathcast::trainer::{prepare, total_loss, train, TrainConfig};

fn checkpoint_bytes(t: &pathcast::trainer::Trained) -> Vec<u8> {
    t.model.to_checkpoint(None, serde_json::Value::Null).encode().unwrap().1
}

fn squared_norm(t: &pathcast::trainer::Trained) -> f64 {
    t.model
        .store
        .ids()
        .map(|id| t.model.store.value(id).data().iter().map(|x| x * x).sum::<f64>())
        .sum()
}

#[test]
fn zero_epochs_leaves_the_initial_parameters() {
    let corpus = common::fixture();
    let split = common::split(&corpus);
    let cfg = TrainConfig {
        epochs: 0,
        ..common::fixture_config()
    };
    let init = prepare(&corpus, &split, &cfg, None).unwrap();
    let trained = train(&corpus, &split, &cfg, None).unwrap();
    assert!(trained.log.is_empty());
    assert_eq!(checkpoint_bytes(&init), checkpoint_bytes(&trained));
}

#[test]
fn same_seed_same_model() {
    let corpus = common::fixture();
    let split = common::split(&corpus);
    let cfg = common::fixture_config();
    let a = train(&corpus, &split, &cfg, None).unwrap();
    let b = train(&corpus, &split, &cfg, None).unwrap();
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    let losses = |t: &pathcast::trainer::Trained| t.log.iter().map(|e| e.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));

    let c = train(&corpus, &split, &TrainConfig { seed: 9, ..cfg }, None).unwrap();
    assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
}

#[test]
fn training_loss_goes_down() {
    let corpus = common::fixture();
    let split = common::split(&corpus);
    let cfg = TrainConfig {
        epochs: 8,
        lr: 3e-3,
        ..common::fixture_config()
    };
    let t = train(&corpus, &split, &cfg, None).unwrap();
    let first = t.log.first().unwrap().train_loss;
    let last = t.log.last().unwrap().train_loss;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn heavy_l2_shrinks_every_epoch() {
    let corpus = common::fixture();
    let split = common::split(&corpus);
    let base = TrainConfig {
        lambda2: 100.0,
        lr: 1e-3,
        ..common::fixture_config()
    };
    let mut norms = vec![squared_norm(&prepare(&corpus, &split, &TrainConfig { epochs: 0, ..base.clone() }, None).unwrap())];
    for epochs in 1..=5 {
        let t = train(&corpus, &split, &TrainConfig { epochs, ..base.clone() }, None).unwrap();
        norms.push(squared_norm(&t));
    }
    for w in norms.windows(2) {
        assert!(w[1] < w[0], "norms {norms:?}");
    }
}

#[test]
fn evaluation_is_repeatable() {
    let corpus = common::fixture();
    let split = common::split(&corpus);
    let cfg = common::fixture_config();
    let t = train(&corpus, &split, &cfg, None).unwrap();
    let before = checkpoint_bytes(&t);
    let r1 = evaluate(&t.model, &t.ctx, &corpus, &split, &[0, 1], &DEFAULT_KS, cfg.batch_size).unwrap();
    let r2 = evaluate(&t.model, &t.ctx, &corpus, &split, &[0, 1], &DEFAULT_KS, cfg.batch_size).unwrap();
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(before, checkpoint_bytes(&t));
}

#[test]
fn total_loss_by_hand() {
    let w = LossWeights {
        lambda1: 0.5,
        lambda2: 0.01,
    };
    // 1.25 + 0.5 * (0.5 + 1.5) + 0.01 * 40
    assert!((total_loss(1.25, &[0.5, 1.5], 40.0, w) - 2.65).abs() < 1e-12);
    assert_eq!(total_loss(0.0, &[], 0.0, w), 0.0);
}
