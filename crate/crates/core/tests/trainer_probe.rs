use hdspace_core::dataset::{collect_corpus, Mode};
use hdspace_core::policy::MaskConfig;
use hdspace_core::sim::TaskId;
use hdspace_core::trainer::{train_set, TrainConfig, TrainSet, LOG_EVERY};

#[test]
fn small_corpus_is_overfit() {
    let eps = collect_corpus(TaskId::Teacup, Mode::Naive, 10, 300, None, None).unwrap();
    let cfg = TrainConfig { steps: 5_000, seed: 4, ..TrainConfig::default() };
    let set = TrainSet::new(&eps, &cfg.arch).unwrap();
    let out = train_set(&set, &cfg).unwrap();
    assert_eq!(out.log.len(), cfg.steps / LOG_EVERY);
    assert_eq!(out.grad_norms.len(), cfg.steps);
    assert!(out.grad_norms.iter().all(|&g| g.is_finite() && g <= cfg.clip_norm + 1e-6));
    let (first, last) = (out.log[0].mean_loss, out.log.last().unwrap().mean_loss);
    assert!(last < 0.2 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_seed_deterministic() {
    let mut eps = collect_corpus(TaskId::Pens, Mode::Naive, 2, 10, None, None).unwrap();
    eps.extend(collect_corpus(TaskId::Pens, Mode::Hd, 2, 20, None, None).unwrap());
    let run = |seed: u64, mask: MaskConfig| {
        let cfg = TrainConfig { steps: 150, batch: 8, seed, mask, ..TrainConfig::default() };
        let set = TrainSet::new(&eps, &cfg.arch).unwrap();
        train_set(&set, &cfg).unwrap()
    };
    let (a, b) = (run(1, MaskConfig::default()), run(1, MaskConfig::default()));
    assert!(a.params.values.iter().zip(&b.params.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.log, b.log);
    assert_ne!(a.params.values, run(2, MaskConfig::default()).params.values);
    assert_ne!(a.params.values, run(1, MaskConfig::disabled()).params.values);
}
