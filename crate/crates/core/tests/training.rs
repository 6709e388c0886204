mod common;

use pseudoheal::experiment::{run_training, training_pools, LOSSES_CSV};
use pseudoheal::train::{train, Setting, TrainData, TrainOptions};

#[test]
fn identical_runs_are_bitwise_reproducible() {
    common::check_reproducibility().unwrap();
}

#[test]
fn short_runs_train_in_every_setting_with_finite_losses() {
    let corpus = common::tiny_corpus(5);
    let pools = training_pools(&corpus).unwrap();
    for setting in [Setting::Paired, Setting::Unpaired, Setting::Semi { ratio: 0.5 }] {
        let mut cfg = common::tiny_train(3);
        cfg.setting = setting;
        let data = TrainData {
            pathological: &pools.pathological,
            healthy: &pools.healthy,
            mask_pool: &pools.mask_pool,
        };
        let out = train(data, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(out.counters.generator_updates, 3, "{setting:?}");
        assert_eq!(out.log.rows().len(), 3);
        assert!(out.log.rows().iter().flatten().all(|v| v.is_finite()), "{setting:?}");
        let dice_calls = out.counters.dice_calls;
        match setting {
            Setting::Paired => assert!(dice_calls > 0),
            Setting::Unpaired => assert_eq!(dice_calls, 0),
            Setting::Semi { .. } => {}
        }
    }
}

#[test]
fn a_finished_run_is_reused() {
    let corpus = common::tiny_corpus(6);
    let cfg = common::tiny_train(2);
    let dir = tempfile::tempdir().unwrap();
    let first = run_training(&corpus, &cfg, dir.path(), false).unwrap();
    assert!(first.trained);
    assert!(dir.path().join(LOSSES_CSV).exists());
    let second = run_training(&corpus, &cfg, dir.path(), false).unwrap();
    assert!(!second.trained);
    assert_eq!(first.model_hash, second.model_hash);

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(run_training(&corpus, &other, dir.path(), false).is_err());
}
